import numpy as np
import pytest
from conftest import damped_plant, one_step_plant, three_step_plant, two_step_plant
from hypothesis import given, settings
from hypothesis import strategies as st

from hdsched.channels import MarkovChannel, StaticChannel
from hdsched.policies import OptimalScheduler
from hdsched.simulator import ExperimentConfig, run
from hdsched.stability import (
    INCONCLUSIVE,
    NOT_STABILIZABLE,
    STABILIZABLE,
    check_fading,
    check_naive_static,
    check_optimal_static,
    detect_divergence,
    divergence_from_checkpoints,
    fading_verdict,
    report,
    thresholds,
)


def test_thresholds_for_reference_plant():
    t_opt, t_naive = thresholds(one_step_plant())
    assert t_opt == pytest.approx(1 / 1.44, abs=1e-9)
    assert t_naive == pytest.approx(1 / 1.44**2, abs=1e-9)
    assert round(t_opt, 4) == 0.6944 and round(t_naive, 4) == 0.4823


@pytest.mark.parametrize(
    "ps, pc, expected",
    [(0.1, 0.1, STABILIZABLE), (0.75, 0.1, NOT_STABILIZABLE), (0.1, 0.75, NOT_STABILIZABLE), (0.6, 0.1, STABILIZABLE)],
)
def test_optimal_verdicts(ps, pc, expected):
    assert check_optimal_static(one_step_plant(), ps, pc) == expected


def test_optimal_boundary_is_strict():
    t = thresholds(one_step_plant())[0]
    assert check_optimal_static(one_step_plant(), t, t) == NOT_STABILIZABLE


@pytest.mark.parametrize("ps, pc, expected", [(0.1, 0.1, STABILIZABLE), (0.6, 0.1, NOT_STABILIZABLE), (0.5, 0.5, NOT_STABILIZABLE)])
def test_naive_verdicts(ps, pc, expected):
    assert check_naive_static(one_step_plant(), ps, pc) == expected


@pytest.mark.parametrize("make", [one_step_plant, two_step_plant, damped_plant, three_step_plant])
def test_naive_threshold_is_square(make):
    t_opt, t_naive = thresholds(make())
    assert t_naive == pytest.approx(t_opt**2, rel=1e-12)


def test_fading_reference_channel_meets_both():
    ch = MarkovChannel([0.1, 0.4], [0.1, 0.4], np.eye(2), np.eye(2))
    assert check_fading(one_step_plant(), ch) == (True, True)


def test_fading_necessary_fails():
    ch = MarkovChannel([0.8, 0.9], [0.1], np.full((2, 2), 0.5), [[1.0]])
    assert check_fading(one_step_plant(), ch)[0] is False
    assert fading_verdict(one_step_plant(), ch) == NOT_STABILIZABLE


def test_fading_gap_is_inconclusive():
    ch = MarkovChannel([0.1, 0.8], [0.1], np.full((2, 2), 0.5), [[1.0]])
    assert check_fading(one_step_plant(), ch) == (True, False)
    assert fading_verdict(one_step_plant(), ch) == INCONCLUSIVE


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_single_state_channel_reduces_to_static(ps, pc):
    plant = one_step_plant()
    ch = MarkovChannel([ps], [pc], [[1.0]], [[1.0]])
    assert fading_verdict(plant, ch) == check_optimal_static(plant, ps, pc)


def test_report_lines():
    rep = report(one_step_plant(), StaticChannel(0.1, 0.1))
    assert "optimal: Stabilizable (0.1 < 0.6944)" in rep.lines()
    assert rep.threshold_naive < rep.threshold_optimal
    rep = report(one_step_plant(), StaticChannel(0.5, 0.5))
    assert rep.verdicts["round_robin"] == NOT_STABILIZABLE
    assert rep.verdicts["persistent"] == STABILIZABLE


def test_detector_constant_trace():
    assert detect_divergence(np.full(100_000, 4.2), window=10_000) is False


def test_detector_geometric_trace():
    assert detect_divergence(1.0001 ** np.arange(100_000), window=10_000) is True


def test_detector_needs_five_growing_pairs():
    assert divergence_from_checkpoints([1, 2, 4, 8, 16, 32]) is True
    assert divergence_from_checkpoints([1, 2, 4, 8, 16, 16]) is False
    assert divergence_from_checkpoints([1, 2, 4, 8, 16, 8, 16, 32, 64, 128]) is False


def test_detector_flags_overflow():
    assert divergence_from_checkpoints([1.0, np.inf]) is True


def test_detector_short_trace():
    with pytest.raises(ValueError, match="shorter"):
        detect_divergence(np.ones(19_999), window=10_000)


def test_optimal_policy_beyond_threshold_flags_within_1e5_slots():
    plant, ch = one_step_plant(), StaticChannel(0.75, 0.75)
    est = OptimalScheduler().fit(plant, ch)
    cfg = ExperimentConfig(plant, ch, "optimal", K=100_000, replications=100, seed=1)
    res = run(cfg, est)
    ratios = np.round(res.checkpoints[1:] / res.checkpoints[:-1], 2)
    assert res.diverged is True, f"window-end growth ratios {ratios.tolist()}"

import numpy as np
import pytest
from conftest import MEMORYLESS, fading, one_step_plant, two_step_plant

from hdsched.channels import MarkovChannel, StaticChannel
from hdsched.plant import F, PlantModel
from hdsched.policies import OptimalScheduler, PersistentScheduler
from hdsched.simulator import (
    MAX_TRACE_POINTS,
    ExperimentConfig,
    MissingPolicyError,
    cycle_stats,
    run,
)

PERFECT = MarkovChannel([0.0], [0.0], [[1.0]], [[1.0]])


def cfg(policy="persistent", channel=None, plant=None, **kw):
    kw.setdefault("K", 2000)
    kw.setdefault("replications", 4)
    kw.setdefault("seed", 7)
    return ExperimentConfig(plant or one_step_plant(), channel or StaticChannel(0.1, 0.1), policy, **kw)


@pytest.mark.parametrize("policy", ["persistent", "naive", "fd"])
def test_bit_identical_reruns(policy):
    a, b = run(cfg(policy)), run(cfg(policy))
    assert np.array_equal(a.running_avg, b.running_avg)
    assert np.array_equal(a.final_costs, b.final_costs)
    assert a.action_freq == b.action_freq


def test_seed_changes_result():
    assert run(cfg(seed=1)).mean_cost != run(cfg(seed=2)).mean_cost


@pytest.mark.parametrize("policy", ["persistent", "naive", "fd", "optimal"])
@pytest.mark.parametrize("channel", [StaticChannel(0.2, 0.3), fading(MEMORYLESS)])
def test_engines_agree(policy, channel):
    plant = two_step_plant()
    c = cfg(policy, channel, plant, K=3000, replications=3, bound=8)
    sched = OptimalScheduler(bound=8).fit(plant, channel) if policy == "optimal" else None
    a = run(c, sched, keep_rep=1, engine="compiled")
    b = run(c, sched, keep_rep=1, engine="numpy")
    assert np.array_equal(a.per_slot["actions"], b.per_slot["actions"])
    np.testing.assert_allclose(a.running_avg, b.running_avg, rtol=1e-10)
    assert a.action_freq == b.action_freq


def test_full_duplex_near_perfect_links_cost():
    # every slot: fresh estimate and fresh command
    plant = one_step_plant()
    res = run(cfg("fd", StaticChannel(1e-9, 1e-9), K=10_000, replications=100, seed=3))
    expected = np.trace(plant.Q @ F(plant, 2))
    assert expected == pytest.approx(3.93, abs=1e-12)
    assert res.mean_cost == pytest.approx(expected, rel=0.02)


def test_zero_noise_perfect_links_cost_vanishes():
    base = one_step_plant()
    plant = PlantModel(base.A, base.B, base.K, base.Q, base.R * 1e-12, v=1)
    res = run(cfg("persistent", PERFECT, plant, K=10_000, replications=2), keep_rep=0)
    assert res.mean_cost < 1e-3
    assert np.all(res.per_slot["costs"][10:] < 1e-9)


def test_perfect_links_cycles_have_length_two():
    res = run(cfg("persistent", PERFECT, K=5000, replications=1), keep_rep=0)
    st = cycle_stats(res.per_slot["actions"], res.per_slot["costs"])
    assert st.mean_L == 2.0
    assert np.all(np.diff(np.flatnonzero(res.per_slot["actions"] == 1)) == 2)


def test_cycle_stats_needs_hundred_cycles():
    actions = np.tile([1, 2], 100)
    with pytest.raises(ValueError, match="complete cycles"):
        cycle_stats(actions, np.ones_like(actions, dtype=float))
    assert cycle_stats(np.tile([1, 2], 101), np.ones(202)).n_cycles == 100


def test_cycle_stats_on_known_sequence():
    actions = np.array([2, 2] + [1, 1, 2] * 150 + [1])
    costs = np.arange(len(actions), dtype=float)
    st = cycle_stats(actions, costs)
    assert st.n_cycles == 150 and st.mean_L == 3.0
    assert st.ratio == pytest.approx(costs[2:452].mean())


def test_mean_cycle_length():
    res = run(cfg("persistent", K=1_000_000, replications=1, seed=5))
    assert res.cycles.mean_L == pytest.approx(1 / 0.9 + 1 / 0.9, rel=0.01)
    assert res.cycles.ratio == pytest.approx(res.mean_cost, rel=0.02)


def test_missing_policy_table():
    with pytest.raises(MissingPolicyError):
        run(cfg("optimal"))
    with pytest.raises(MissingPolicyError):
        run(cfg("optimal"), OptimalScheduler())


def test_table_mismatch_rejected():
    est = OptimalScheduler(bound=10).fit(one_step_plant(), StaticChannel(0.1, 0.1))
    with pytest.raises(ValueError, match="does not match"):
        run(cfg("optimal"), est)  # config bound is 20
    with pytest.raises(ValueError, match="different channel"):
        run(cfg("optimal", StaticChannel(0.2, 0.1), bound=10), est)


def test_result_invariants():
    res = run(cfg("naive", K=5000))
    assert sum(res.action_freq.values()) == pytest.approx(1.0)
    assert np.all(res.final_costs >= 0) and np.all(res.running_avg >= 0)
    assert res.slots[-1] == 5000 and len(res.slots) <= MAX_TRACE_POINTS
    np.testing.assert_allclose(res.running_avg[:, -1], res.final_costs)
    assert res.metadata["config_hash"] == cfg("naive", K=5000).config_hash()


def test_trace_downsampled_for_long_runs():
    res = run(cfg(K=123_457, replications=1))
    assert len(res.slots) <= MAX_TRACE_POINTS and res.slots[-1] == 123_457


def test_common_random_numbers_across_policies():
    # the first control success hits the same slot whenever the schedules agree
    a = run(cfg("persistent", K=50, replications=1), keep_rep=0)
    b = run(cfg("persistent", K=50, replications=1), PersistentScheduler().fit(one_step_plant(), None), keep_rep=0)
    assert np.array_equal(a.per_slot["costs"], b.per_slot["costs"])


def test_custom_scheduler_uses_numpy_engine():
    class AlwaysSense(PersistentScheduler):
        def decide_batch(self, taus, phis, hs=None, hc=None, slot=0):
            return np.ones(len(taus), dtype=np.int8)

    res = run(cfg(K=200, replications=2), AlwaysSense().fit(one_step_plant(), None))
    assert res.action_freq["sense"] == 1.0
    with pytest.raises(ValueError):
        run(cfg(K=200), AlwaysSense().fit(one_step_plant(), None), engine="compiled")


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(K=0)
    with pytest.raises(ValueError):
        cfg(x0=(1.0, 2.0, 3.0))
    with pytest.raises(ValueError):
        cfg(bound=2)


def test_reference_config_cost_gaps():
    from hdsched.config import load_preset
    c = load_preset("fig4")
    est = OptimalScheduler().fit(c.plant, c.channel)
    r = {k: run(c, est if k == "optimal" else k) for k in ("fd", "optimal", "persistent", "naive")}

    def gap(a, b):
        # paired replications share their random draws
        d = r[b].final_costs - r[a].final_costs
        return d.mean() / (d.std(ddof=1) / np.sqrt(len(d)))

    assert gap("fd", "optimal") > 3
    assert gap("persistent", "naive") > 3
    assert r["optimal"].mean_cost <= r["persistent"].mean_cost <= 1.15 * r["optimal"].mean_cost

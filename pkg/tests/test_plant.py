import numpy as np
import pytest
from conftest import A_FARM, I2, damped_plant, one_step_plant, random_history, three_step_plant, two_step_plant

from hdsched.dynamics import LoopState, forced_schedule, state_params, step, vstep_explicit_state
from hdsched.mdp import TruncatedSpace
from hdsched.plant import (
    F,
    G,
    PlantModel,
    classify,
    covariance_vstep,
    stage_cost_one_step,
    stage_cost_vstep,
    stage_costs,
)


def explicit_F(A, R, tau):
    A = np.asarray(A)
    return sum(np.linalg.matrix_power(A, i) @ R @ np.linalg.matrix_power(A, i).T for i in range(tau))


class TestValidation:
    def test_stable_plant_rejected(self):
        with pytest.raises(ValueError, match="unstable"):
            PlantModel(0.5 * I2, -I2, 0.5 * I2, I2, I2)

    def test_unstable_closed_loop_rejected(self):
        with pytest.raises(ValueError, match="rho"):
            PlantModel(A_FARM, -I2, np.zeros((2, 2)), I2, I2)

    def test_cost_weight_must_be_psd(self):
        with pytest.raises(ValueError, match="Q"):
            PlantModel(A_FARM, -I2, A_FARM, -I2, I2)

    def test_noise_covariance_must_be_pd(self):
        with pytest.raises(ValueError, match="R"):
            PlantModel(A_FARM, -I2, A_FARM, I2, np.zeros((2, 2)))

    def test_asymmetric_weight_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            PlantModel(A_FARM, -I2, A_FARM, [[1.0, 0.5], [0.0, 1.0]], I2)

    @pytest.mark.parametrize("v", [0, -1, 1.5])
    def test_horizon_must_be_positive_integer(self, v):
        with pytest.raises(ValueError):
            PlantModel(A_FARM, -I2, A_FARM, I2, I2, v=v)

    def test_gain_shape_checked(self):
        with pytest.raises(ValueError, match="K"):
            PlantModel(A_FARM, [[-1.0], [-1.0]], A_FARM, I2, I2)

    def test_flat_single_input_column_accepted(self):
        p = PlantModel(A_FARM, [-1.0, -1.0], [[2.9, -1.0]], I2, I2)
        assert p.B.shape == (2, 1)

    def test_matrices_read_only(self, plant1):
        with pytest.raises(ValueError):
            plant1.A[0, 0] = 3.0


class TestClassify:
    def test_one_step(self):
        assert str(classify(one_step_plant())) == "OneStep"

    def test_two_step(self):
        c = classify(two_step_plant())
        assert (c.kind, c.v) == ("v_step", 2)
        assert str(c) == "VStep(2)"

    def test_three_step(self):
        assert str(classify(three_step_plant())) == "VStep(3)"

    def test_damped_gain_is_not_finite_step(self):
        c = classify(damped_plant(3), max_v=10)
        assert c.kind == "non_finite"
        assert c.v == 3

    def test_rho_of_damped_loop(self):
        from hdsched.matlite import spectral_radius

        assert spectral_radius(damped_plant().closed_loop) == pytest.approx(0.72, abs=0.005)


class TestF:
    def test_first_term_is_noise(self, plant1):
        np.testing.assert_array_equal(F(plant1, 1), I2)

    def test_two_slots_hand_value(self, plant1):
        np.testing.assert_allclose(F(plant1, 2), [[2.25, 0.38], [0.38, 1.68]], atol=1e-12)

    def test_three_slots_adds_squared_term(self, plant1):
        A2 = np.linalg.matrix_power(np.array(A_FARM), 2)
        np.testing.assert_allclose(F(plant1, 3), F(plant1, 2) + A2 @ A2.T, atol=1e-12)

    @pytest.mark.parametrize("tau", range(1, 31))
    def test_recursion_matches_explicit_sum(self, plant1, tau):
        A = np.array(A_FARM)
        ref = explicit_F(A, I2, tau)
        np.testing.assert_allclose(F(plant1, tau), ref, rtol=1e-9)
        np.testing.assert_allclose(F(plant1, tau + 1), A @ F(plant1, tau) @ A.T + I2, rtol=1e-9)

    def test_invalid_tau(self, plant1):
        with pytest.raises(ValueError):
            F(plant1, 0)


class TestG:
    def test_zero_exponent_is_identity_map(self, plant2):
        Y = F(plant2, 3)
        np.testing.assert_array_equal(G(plant2, 0, Y), Y)

    @pytest.mark.parametrize("x", [1, 2, 5])
    def test_one_step_kills_everything(self, plant1, x):
        assert np.all(np.abs(G(plant1, x, F(plant1, 4))) < 1e-12)

    def test_two_step_vanishes_at_two(self, plant2):
        assert np.all(np.abs(G(plant2, 2, F(plant2, 3))) < 1e-9)
        assert np.abs(G(plant2, 1, F(plant2, 3))).max() > 1e-3


class TestStageCost:
    def test_value_at_two(self, plant1):
        assert stage_cost_one_step(plant1, 2) == pytest.approx(3.93, abs=1e-12)

    def test_value_at_three(self, plant1):
        A2 = np.linalg.matrix_power(np.array(A_FARM), 2)
        assert stage_cost_one_step(plant1, 3) == pytest.approx(3.93 + np.trace(A2 @ A2.T), abs=1e-12)

    def test_strictly_increasing(self, plant1):
        c = [stage_cost_one_step(plant1, f) for f in range(2, 41)]
        assert all(b > a for a, b in zip(c, c[1:]))

    def test_phi_below_two_rejected(self, plant1):
        with pytest.raises(ValueError):
            stage_cost_one_step(plant1, 1)

    def test_vstep_reduces_to_one_step(self, plant1):
        for f in (2, 5, 9):
            assert stage_cost_vstep(plant1, (), (f,)) == stage_cost_one_step(plant1, f)


class TestCovarianceVStep:
    def test_single_horizon_is_F(self, plant1):
        np.testing.assert_array_equal(covariance_vstep(plant1, (), (5,)), F(plant1, 5))

    def test_gate_closed_leaves_first_term(self, plant2):
        np.testing.assert_array_equal(covariance_vstep(plant2, (3,), (4, 3)), F(plant2, 4))

    def test_gate_open_adds_propagated_term(self, plant2):
        P = covariance_vstep(plant2, (1,), (3, 4))
        M = plant2.closed_loop
        ref = F(plant2, 3) + np.linalg.matrix_power(M, 2) @ (F(plant2, 4) - F(plant2, 1)) @ np.linalg.matrix_power(M, 2).T
        np.testing.assert_allclose(P, ref, atol=1e-12)

    def test_wrong_lengths_rejected(self, plant2):
        with pytest.raises(ValueError):
            covariance_vstep(plant2, (), (3, 4))

    @pytest.mark.parametrize("make, bound", [(two_step_plant, 20), (three_step_plant, 6)])
    def test_symmetric_psd_on_truncated_space(self, make, bound):
        p = make()
        sp = TruncatedSpace(bound, p.v)
        rng = np.random.default_rng(0)
        ids = rng.choice(len(sp), size=min(len(sp), 3000), replace=False)
        floor = np.trace(p.Q @ p.R)
        for i in ids:
            P = covariance_vstep(p, sp.taus[i, 1:], sp.phis[i])
            assert np.allclose(P, P.T, atol=1e-9)
            assert np.linalg.eigvalsh(P)[0] >= -1e-8
            # P dominates R, so the cost dominates Tr(Q R)
            assert np.linalg.eigvalsh(P - p.R)[0] >= -1e-8
            assert np.trace(p.Q @ P) >= floor - 1e-9

    @pytest.mark.parametrize("make, bound", [(one_step_plant, 20), (two_step_plant, 10), (three_step_plant, 5)])
    def test_vectorised_costs_match_scalar_route(self, make, bound):
        p = make()
        sp = TruncatedSpace(bound, p.v)
        vec = stage_costs(p, sp.taus[:, 1:], sp.phis)
        ref = np.array([stage_cost_vstep(p, t[1:], f) for t, f in zip(sp.taus, sp.phis)])
        np.testing.assert_allclose(vec, ref, rtol=1e-12)


def _oracle_cov(p, etas, taus, samples, rng):
    need = sum(etas) + taus[-1]
    z = rng.standard_normal((need, samples, p.n))
    noise = z @ np.linalg.cholesky(p.R).T
    x = vstep_explicit_state(p, etas, taus, noise)
    return x.T @ x / samples


def _closed_loop_cov(p, etas, taus, samples, rng):
    """Drive ``step`` through a forced schedule with a batch of noise paths."""
    plan = forced_schedule(etas, taus)
    loop = LoopState.initial(p, np.zeros((samples, p.n)))
    L = np.linalg.cholesky(p.R)
    for action, ok in plan:
        w = rng.standard_normal((samples, p.n)) @ L.T
        loop = step(loop, p, action, up_ok=ok, down_ok=ok, w=w)
    return loop.x.T @ loop.x / samples, loop.sched


def rel_frob(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.parametrize("etas, taus", [([2, 2], [1, 2]), ([2, 3], [1, 1])])
def test_example_tuple_against_noise_sum_oracle(plant2, etas, taus):
    # both histories give (tau^1, phi^0, phi^1) = (1, 3, 4)
    t_params, phis = state_params(etas, taus)
    assert (t_params, phis) == ((1,), (3, 4))
    P = covariance_vstep(plant2, t_params, phis)
    emp = _oracle_cov(plant2, etas, taus, 100_000, np.random.default_rng(3))
    np.testing.assert_allclose(emp, P, rtol=0.05)


@pytest.mark.parametrize("make", [two_step_plant, three_step_plant])
def test_random_histories_both_routes(make):
    p = make()
    rng = np.random.default_rng(11 + p.v)
    for _ in range(4):
        etas, taus = random_history(rng, p.v)
        t_params, phis = state_params(etas, taus)
        P = covariance_vstep(p, t_params, phis)
        assert rel_frob(_oracle_cov(p, etas, taus, 40_000, rng), P) < 0.05
        emp, sched = _closed_loop_cov(p, etas, taus, 40_000, rng)
        assert rel_frob(emp, P) < 0.05
        # the loop's own indicators agree with the history
        assert sched.taus[1:] == t_params
        assert sched.phis == phis

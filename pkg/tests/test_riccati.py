import math

import numpy as np
import pytest

from robust_dp.experiments import kinematics, timeseries
from robust_dp.matcore import fro, is_hurwitz, solve_lyapunov
from robust_dp.riccati import (
    CostWeights,
    DmreBlowUp,
    LtiSystem,
    StabilizationError,
    closed_loop_gain,
    integrate_dmre,
    l2_gain_ratio,
    riccati_residual,
    scale_cost,
    solve_are_kleinman,
)

from .conftest import random_hurwitz, random_spd

ROOT2M1 = math.sqrt(2.0) - 1.0
# paper's displayed kinematics matrix disagrees with the stated plant; see the ledger
KINEMATICS_CONFLICT = pytest.mark.xfail(strict=True, reason="displayed P* does not solve the stated plant's ARE")


class TestTypes:
    def test_rejects_singular_r(self):
        with pytest.raises(ValueError):
            CostWeights([[1.0]], [[0.0]])

    def test_rejects_indefinite_q(self):
        with pytest.raises(ValueError):
            CostWeights([[-1.0]], [[1.0]])

    def test_shape_mismatch(self, scalar_plant):
        sys, _ = scalar_plant
        with pytest.raises(ValueError):
            riccati_residual(np.eye(1), sys, CostWeights(np.eye(2), [[1.0]]))


class TestResidual:
    def test_zero(self, kinematics_problem):
        sys, cost, _ = kinematics_problem
        assert np.array_equal(riccati_residual(np.zeros((3, 3)), sys, cost), cost.Q)

    def test_scalar_root(self, scalar_plant):
        assert abs(riccati_residual([[ROOT2M1]], *scalar_plant).item()) <= 1e-12

    @KINEMATICS_CONFLICT
    def test_kinematics_displayed_matrix(self, kinematics_problem):
        sys, cost, _ = kinematics_problem
        assert fro(riccati_residual(kinematics.REFERENCE_P, sys, cost)) <= 5e-3

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        sys = LtiSystem(rng.standard_normal((4, 4)), rng.standard_normal((4, 2)))
        cost = CostWeights(random_spd(rng, 4), random_spd(rng, 2))
        R = riccati_residual(random_spd(rng, 4), sys, cost)
        assert np.array_equal(R, R.T)


class TestGain:
    def test_zero(self, scalar_plant):
        assert closed_loop_gain([[0.0]], *scalar_plant).item() == 0.0

    def test_unit(self):
        assert closed_loop_gain([[1.0]], LtiSystem([[0.0]], [[1.0]]), CostWeights([[1.0]], [[1.0]])).item() == 1.0

    def test_kinematics_displayed_gain(self, kinematics_problem):
        sys, cost, _ = kinematics_problem
        K = closed_loop_gain(kinematics.REFERENCE_P, sys, cost)
        np.testing.assert_allclose(K, [[1.0, 0.248, 0.431]], atol=1e-12)
        assert is_hurwitz(sys.A - sys.B @ K)


class TestKleinman:
    def test_scalar(self, scalar_plant):
        sol = solve_are_kleinman(*scalar_plant)
        assert abs(sol.P_star.item() - ROOT2M1) <= 1e-12

    @KINEMATICS_CONFLICT
    def test_kinematics_matches_display(self, kinematics_problem):
        _, _, sol = kinematics_problem
        assert np.max(np.abs(sol.P_star - kinematics.REFERENCE_P)) <= 5e-4

    def test_kinematics_frozen(self, kinematics_problem):
        # value for the stated plant (mass 1, damping 1, tau 0.1)
        _, _, sol = kinematics_problem
        expected = [[2.4832, 1.4832, 0.1], [1.4832, 1.4832, 0.1], [0.1, 0.1, 0.0483]]
        np.testing.assert_allclose(sol.P_star, expected, atol=5e-5)

    def test_timeseries_matches_display(self, timeseries_problem):
        _, _, sol = timeseries_problem
        assert np.max(np.abs(sol.P_star - timeseries.REFERENCE_P)) <= 5e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_invariants(self, seed):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        sys = LtiSystem(random_hurwitz(rng, n), rng.standard_normal((n, m)))
        cost = CostWeights(random_spd(rng, n), random_spd(rng, m))
        sol = solve_are_kleinman(sys, cost)
        assert sol.residual_norm <= 1e-9 * max(1.0, fro(sol.P_star))
        np.testing.assert_allclose(sol.K_star, cost.Rinv @ sys.B.T @ sol.P_star, atol=1e-10)
        assert is_hurwitz(sys.A - sys.B @ sol.K_star)
        assert np.linalg.eigvalsh(sol.P_star).min() > 0

    def test_non_stabilizing_k0(self):
        with pytest.raises(StabilizationError):
            solve_are_kleinman(LtiSystem([[1.0]], [[1.0]]), CostWeights([[1.0]], [[1.0]]))


class TestDmre:
    def test_equilibrium(self, kinematics_problem):
        sys, cost, sol = kinematics_problem
        traj = integrate_dmre(sys, cost, sol.P_star, 10.0, 1e-3, stride=100)
        assert max(fro(P - sol.P_star) for P in traj.P) <= 1e-9

    def test_scalar_limit(self, scalar_plant):
        traj = integrate_dmre(*scalar_plant, [[0.0]], 20.0, 1e-3)
        assert abs(traj.final.item() - ROOT2M1) <= 1e-8

    def test_kinematics_from_zero(self, kinematics_problem):
        sys, cost, sol = kinematics_problem
        traj = integrate_dmre(sys, cost, np.zeros((3, 3)), 50.0, 1e-3, stride=1000)
        assert fro(traj.final - sol.P_star) <= 1e-6

    def test_samples_symmetric_and_strided(self, kinematics_problem):
        sys, cost, _ = kinematics_problem
        traj = integrate_dmre(sys, cost, np.eye(3), 1.0, 0.01, stride=7)
        assert traj.t[0] == 0.0 and math.isclose(traj.t[-1], 1.0)
        assert all(np.array_equal(P, P.T) for P in traj.P)

    @pytest.mark.parametrize("seed", range(5))
    def test_ordering_from_above(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = 3
        sys = LtiSystem(random_hurwitz(rng, n), rng.standard_normal((n, 2)))
        cost = CostWeights(random_spd(rng, n), random_spd(rng, 2))
        sol = solve_are_kleinman(sys, cost)
        P0 = sol.P_star + random_spd(rng, n)
        traj = integrate_dmre(sys, cost, P0, 10.0, 1e-3, stride=10)
        assert min(np.linalg.eigvalsh(P - sol.P_star).min() for P in traj.P) >= -1e-8

    def test_vanishing_disturbance(self, kinematics_problem):
        sys, cost, sol = kinematics_problem
        eye = np.eye(3)
        traj = integrate_dmre(sys, cost, np.zeros((3, 3)), 50.0, 1e-3, lambda t: math.exp(-t) * eye, stride=1000)
        assert fro(traj.final - sol.P_star) <= 1e-6

    def test_bounded_disturbance(self, kinematics_problem):
        sys, cost, sol = kinematics_problem
        eye = np.eye(3)
        # Q + 0.1 sin(t) I stays PSD since Q = I
        traj = integrate_dmre(sys, cost, np.zeros((3, 3)), 200.0, 1e-2, lambda t: 0.1 * math.sin(t) * eye, stride=10)
        dev = np.array([fro(P - sol.P_star) for P in traj.P])
        assert np.all(np.isfinite(dev))
        assert dev[len(dev) // 2 :].max() <= 1.0
        assert fro(traj.P.max(axis=0)) <= 2.0 * fro(sol.P_star)

    def test_blow_up_reports_time(self):
        sys = LtiSystem([[0.0]], [[1.0]])
        with pytest.raises(DmreBlowUp) as info:
            integrate_dmre(sys, CostWeights([[1.0]], [[1.0]]), [[-2.0]], 10.0, 1e-2)
        assert 0.0 < info.value.last_time < 10.0

    def test_l2_gain_ratio(self, kinematics_problem):
        sys, cost, sol = kinematics_problem
        eye = np.eye(3)
        d = lambda t: 0.2 * math.exp(-0.1 * t) * eye  # noqa: E731
        traj = integrate_dmre(sys, cost, sol.P_star, 40.0, 1e-2, d)
        ratio = l2_gain_ratio(traj.t, traj.P - sol.P_star, [d(t) for t in traj.t])
        assert 0.0 < ratio < 10.0


class TestScaling:
    def test_identity(self, kinematics_problem):
        _, cost, _ = kinematics_problem
        for mode in ("proportional", "gain_assignment"):
            c = scale_cost(cost, 1.0, mode)
            assert np.array_equal(c.Q, cost.Q) and np.array_equal(c.R, cost.R)

    @pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
    def test_proportional(self, lam, kinematics_problem):
        sys, cost, base = kinematics_problem
        sol = solve_are_kleinman(sys, scale_cost(cost, lam), K0=[[0.1, 0.1, 0.0]])
        assert fro(sol.K_star - base.K_star) <= 1e-8 * max(1.0, fro(base.K_star))
        assert fro(sol.P_star - lam * base.P_star) <= 1e-8 * fro(lam * base.P_star)

    def test_gain_assignment_moves_poles_left(self):
        rng = np.random.default_rng(5)
        A = random_hurwitz(rng, 3)
        sys = LtiSystem(A, np.eye(3) + 0.2 * rng.standard_normal((3, 3)))
        cost = CostWeights(random_spd(rng, 3), random_spd(rng, 3))
        rates = []
        for lam in (1.0, 0.1, 0.01):
            sol = solve_are_kleinman(sys, scale_cost(cost, lam, "gain_assignment"))
            Acl = sys.A - sys.B @ sol.K_star
            # Lyapunov decay rate: 1 / lambda_max(X) with Acl^T X + X Acl = -I
            X = solve_lyapunov(Acl, np.eye(3))
            rates.append((np.linalg.eigvals(Acl).real.max(), 1.0 / np.linalg.eigvalsh(X).max()))
        assert rates[0][0] > rates[1][0] > rates[2][0]
        assert rates[0][1] < rates[1][1] < rates[2][1]

    def test_rejects_bad_lambda(self, kinematics_problem):
        with pytest.raises(ValueError):
            scale_cost(kinematics_problem[1], 0.0)

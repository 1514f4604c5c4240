import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_dp.adp import (
    RegressorPair,
    Trajectory,
    TrajectoryExhausted,
    adp_vi_run,
    build_regressors,
    check_pe,
    extract_model_terms,
    learned_drift,
    noisy_model_vi,
    read_trajectory_csv,
    rls_batch,
    rls_init,
    rls_step,
    theta_dims,
    theta_map,
    theta_of,
    write_trajectory_csv,
)
from robust_dp.experiments import kinematics
from robust_dp.matcore import fro, symmetrize, vecs
from robust_dp.riccati import CostWeights, LtiSystem, riccati_residual
from robust_dp.vi import PowerStep, ViConfig, vi_run

from .conftest import random_spd

LAMBDA_SMALL = 1e-9


def exp_trajectory(x0=1.0, T=2.0, dt=1e-3):
    t = np.arange(0.0, T + dt / 2, dt)
    return Trajectory(t, x0 * np.exp(-t), np.zeros_like(t))


def excited_scalar(T=40.0, dt=1e-3, seed=0):
    """Exact samples of dx = -x + u with u a sum of sinusoids."""
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, T + dt / 2, dt)
    w = rng.uniform(0.5, 5.0, 4)
    ph = rng.uniform(0, 2 * np.pi, 4)
    u = np.sin(np.outer(t, w) + ph).sum(axis=1)
    # integrate with a fine RK4 on the same grid (u linearly interpolated)
    x = np.empty_like(t)
    x[0] = 1.0
    f = lambda xv, uv: -xv + uv  # noqa: E731
    for j in range(len(t) - 1):
        um = 0.5 * (u[j] + u[j + 1])
        k1 = f(x[j], u[j])
        k2 = f(x[j] + 0.5 * dt * k1, um)
        k3 = f(x[j] + 0.5 * dt * k2, um)
        k4 = f(x[j] + dt * k3, u[j + 1])
        x[j + 1] = x[j] + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return Trajectory(t, x, u)


class TestTheta:
    def test_scalar_example(self):
        assert theta_of([[1.0]], [[-1.0]], [[1.0]]).tolist() == [-2.0, 1.0, 0.0]

    def test_dims(self):
        assert theta_dims(3, 1) == (10, 9, 6)

    @pytest.mark.parametrize("seed", range(5))
    def test_map_is_linear(self, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
        P = symmetrize(rng.standard_normal((3, 3)))
        np.testing.assert_allclose(theta_map(A, B) @ vecs(P), theta_of(P, A, B), atol=1e-12)


class TestRegressors:
    def test_constant_state(self):
        t = np.linspace(0, 1, 11)
        traj = Trajectory(t, np.full((11, 2), 0.7), np.zeros((11, 1)))
        pairs = build_regressors(traj, [0, 5, 10])
        assert all(not p.phi.any() for p in pairs)

    def test_exponential_identity(self):
        traj = exp_trajectory()
        P = 1.3
        th = theta_of([[P]], [[-1.0]], [[1.0]])
        for pair in build_regressors(traj, range(0, 2001, 200)):
            assert abs(pair.psi @ th - pair.phi[0] * P) <= 1e-6

    def test_identity_random_p(self):
        traj = excited_scalar(T=5.0)
        rng = np.random.default_rng(1)
        pairs = build_regressors(traj, range(0, len(traj), 20))
        for _ in range(10):
            P = rng.uniform(0.1, 3.0)
            th = theta_of([[P]], [[-1.0]], [[1.0]])
            worst = max(abs(p.psi @ th - p.phi[0] * P) for p in pairs)
            assert worst <= 1e-5

    def test_errors(self):
        traj = exp_trajectory(T=0.01)
        with pytest.raises(ValueError):
            build_regressors(traj, [0])
        with pytest.raises(ValueError):
            build_regressors(traj, [0, 100])
        with pytest.raises(ValueError):
            build_regressors(traj, [3, 2])

    def test_csv_round_trip(self, tmp_path):
        traj = excited_scalar(T=0.1)
        back = read_trajectory_csv(write_trajectory_csv(traj, tmp_path / "tr.csv"))
        assert np.array_equal(back.x, traj.x) and np.array_equal(back.u, traj.u) and np.array_equal(back.t, traj.t)


class TestRls:
    def test_zero_psi(self):
        s = rls_init(1, 1)
        s2 = rls_step(s, RegressorPair(np.ones(1), np.zeros(3)))
        assert np.array_equal(s2.Sigma, s.Sigma) and np.array_equal(s2.M, s.M)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2**32 - 1), st.sampled_from([0.1, 1.0, 10.0]))
    def test_batch_equivalence(self, n, m, seed, lam):
        rng = np.random.default_rng(seed)
        q, _, p = theta_dims(n, m)
        state = rls_init(n, m, lam)
        pairs = []
        prev_min = np.inf
        for _ in range(2 * q):
            pairs.append(RegressorPair(rng.standard_normal(p), rng.standard_normal(q)))
            state = rls_step(state, pairs[-1])
            ref = rls_batch(pairs, lam)
            assert np.max(np.abs(state.M - ref)) <= 1e-8 * max(1.0, np.max(np.abs(ref)))
            ev = np.linalg.eigvalsh(state.Sigma)
            assert ev[0] > 0 and ev[0] <= prev_min * (1 + 1e-12)
            prev_min = ev[0]

    def test_learns_exact_map(self):
        traj = excited_scalar()
        pairs = build_regressors(traj, range(0, len(traj), 20))
        # window integrals are O(dt), so the prior weight must sit far below the Gram scale
        state = rls_init(1, 1, LAMBDA_SMALL)
        for pair in pairs:
            state = rls_step(state, pair)
        M_true = theta_map([[-1.0]], [[1.0]])
        rng = np.random.default_rng(2)
        for _ in range(10):
            P = np.array([[rng.uniform(0.1, 3.0)]])
            assert np.linalg.norm(state.M @ vecs(P) - M_true @ vecs(P)) <= 1e-4

    def test_map_error_shrinks(self):
        traj = excited_scalar()
        pairs = build_regressors(traj, range(0, len(traj), 20))
        q = 3
        M_true = theta_map([[-1.0]], [[1.0]])
        errs = [fro(rls_batch(pairs[:l], LAMBDA_SMALL) - M_true) for l in (q, 2 * q, 4 * q, 100 * q)]
        assert all(b < a for a, b in zip(errs, errs[1:]))
        assert errs[-1] <= 1e-5


class TestPe:
    def test_identical(self):
        psi = np.array([1.0, 2.0, 3.0])
        assert not check_pe([RegressorPair(np.zeros(1), psi)] * 10, 1e-6).ok

    def test_basis(self):
        q = 4
        pairs = [RegressorPair(np.zeros(1), e) for e in np.eye(q)]
        rep = check_pe(pairs, 0.2)
        assert rep.ok and rep.min_eig == pytest.approx(1 / q)
        assert not check_pe(pairs, 0.3).ok

    def test_kinematics_exploration(self):
        sys = kinematics.plant(1.0, 1.0, 0.1)
        p = {**kinematics.DEFAULTS, "simulation": {"T": 20.0, "dt": 0.002, "policy_dt": 0.02}}
        traj, _ = kinematics.simulate(sys, p, 0)
        rep = check_pe(build_regressors(traj, range(0, len(traj), 10)), 1e-12)
        assert rep.ok and rep.margin > 0


class TestExtract:
    def test_inverse_of_packing(self):
        rng = np.random.default_rng(0)
        A, B = rng.standard_normal((2, 2)), rng.standard_normal((2, 1))
        P = random_spd(rng, 2)
        R = np.array([[2.0]])
        TA, TB = extract_model_terms(theta_of(P, A, B), 2, 1, R)
        np.testing.assert_allclose(TA, A.T @ P + P @ A, atol=1e-14)
        np.testing.assert_allclose(TB, np.linalg.solve(R, B.T @ P), atol=1e-14)

    def test_zero(self):
        TA, TB = extract_model_terms(np.zeros(6), 2, 1, [[1.0]])
        assert not TA.any() and not TB.any()

    def test_round_trip_random(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(20):
            n, m = int(rng.integers(1, 5)), int(rng.integers(1, 3))
            A, B = rng.standard_normal((n, n)), rng.standard_normal((n, m))
            P, R = random_spd(rng, n), random_spd(rng, m)
            TA, TB = extract_model_terms(theta_of(P, A, B), n, m, R)
            worst = max(worst, np.max(np.abs(TA - (A.T @ P + P @ A))), np.max(np.abs(TB - np.linalg.solve(R, B.T @ P))))
        assert worst <= 1e-12

    def test_short_theta_accepted(self):
        th = theta_of(np.eye(2), -np.eye(2), np.ones((2, 1)))
        a = extract_model_terms(th, 2, 1, [[1.0]])
        b = extract_model_terms(th[:-1], 2, 1, [[1.0]])
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_bad_length(self):
        with pytest.raises(ValueError):
            extract_model_terms(np.zeros(4), 2, 1, [[1.0]])

    def test_learned_drift_is_residual(self, kinematics_problem):
        sys, cost, _ = kinematics_problem
        P = random_spd(np.random.default_rng(4), 3)
        np.testing.assert_allclose(
            learned_drift(theta_of(P, sys.A, sys.B), 3, 1, cost), riccati_residual(P, sys, cost), atol=1e-12
        )


class TestAdpRun:
    def test_exact_map_reproduces_vi(self, kinematics_problem):
        sys, cost, _ = kinematics_problem
        traj = Trajectory(np.arange(3), np.zeros((3, 3)), np.zeros((3, 1)))
        cfg = ViConfig(np.zeros((3, 3)), step=PowerStep(0.05, 0.6), max_iters=3000)
        adp = adp_vi_run(traj, cost, cfg, M_init=theta_map(sys.A, sys.B), learn=False)
        ref = vi_run(sys, cost, cfg)
        assert len(adp.run.trace) == len(ref.trace)
        assert adp.run.restarts == ref.restarts
        # same arithmetic up to operation order
        assert max(fro(a.P - b.P) for a, b in zip(adp.run.trace, ref.trace)) <= 1e-12

    def test_noiseless_scalar(self):
        traj = excited_scalar()
        cost = CostWeights([[1.0]], [[1.0]])
        cfg = ViConfig([[0.0]], step=PowerStep(0.1, 0.3), eps_bar=1e-9, max_iters=1999)
        res = adp_vi_run(traj, cost, cfg, breakpoints=range(0, len(traj), 20), lambda_init=LAMBDA_SMALL)
        assert abs(res.run.final.item() - (math.sqrt(2.0) - 1.0)) <= 1e-4
        assert abs(res.gain.item() - (math.sqrt(2.0) - 1.0)) <= 1e-4

    def test_exhausted(self):
        traj = excited_scalar(T=0.5)
        cost = CostWeights([[1.0]], [[1.0]])
        with pytest.raises(TrajectoryExhausted):
            adp_vi_run(traj, cost, ViConfig([[0.0]], max_iters=10_000), breakpoints=range(0, len(traj), 20))
        res = adp_vi_run(
            traj, cost, ViConfig([[0.0]], max_iters=100), breakpoints=range(0, len(traj), 20), on_exhausted="freeze"
        )
        assert res.run.iterations == 100

    def test_snapshots(self):
        traj = excited_scalar(T=1.0)
        cost = CostWeights([[1.0]], [[1.0]])
        res = adp_vi_run(traj, cost, ViConfig([[0.0]], max_iters=40), M_every=10, breakpoints=range(0, 1001, 20))
        assert [k for k, _ in res.M_trace] == [0, 10, 20, 30]


@pytest.fixture(scope="module")
def setup(kinematics_problem):
    # one noise direction of norm 0.1 on the damping entry
    sys, cost, sol = kinematics_problem
    D = np.zeros((3, 3))
    D[1, 1] = 0.1
    return sys, cost, sol, [D]


class TestNoisyModel:
    def cfg(self, seed):
        return ViConfig(np.zeros((3, 3)), step=PowerStep(0.05, 0.2), max_iters=3000, trace_every=500, seed=seed)

    def test_zero_sigma(self, setup):
        sys, cost, _, dirs = setup
        cfg = self.cfg(0)
        a = noisy_model_vi(sys, cost, dirs, 0.0, cfg)
        b = vi_run(sys, cost, cfg)
        assert np.array_equal(a.final, b.final) and len(a.trace) == len(b.trace)

    def test_averaged_beats_instantaneous(self, setup):
        sys, cost, sol, dirs = setup
        avg, inst = [], []
        for seed in range(20):
            avg.append(fro(noisy_model_vi(sys, cost, dirs, 1.0, self.cfg(seed), "time_averaged").final - sol.P_star))
            inst.append(fro(noisy_model_vi(sys, cost, dirs, 1.0, self.cfg(seed), "instantaneous").final - sol.P_star))
        assert max(avg) <= 1e-2
        assert np.median(inst) > np.median(avg)
        assert np.std(inst) > 0

    def test_rejects_mode(self, setup):
        sys, cost, _, dirs = setup
        with pytest.raises(ValueError):
            noisy_model_vi(sys, cost, dirs, 1.0, self.cfg(0), "bogus")

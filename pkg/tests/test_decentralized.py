import math

import numpy as np
import pytest

from robust_dp.decentralized import (
    CoupledProblem,
    NzsCoupling,
    coupled_residuals,
    coupling_nzs,
    coupling_unmatched,
    decentralized_vi_run,
    default_node_config,
    gain_bound_report,
    nzs_couplings,
    sample_ball,
    solve_coupled_oracle,
    write_node_summary_csv,
)
from robust_dp.matcore import fro, symmetrize
from robust_dp.riccati import ConvergenceError, CostWeights, LtiSystem, solve_are_kleinman
from robust_dp.vi import PowerStep, ViConfig, vi_run

from .conftest import random_hurwitz, random_spd
from .test_vi import traces_equal

LAMBDAS = (1.0, 0.3, 0.1, 0.03)
# oracle values of the symmetric scalar game with R_ij = λ²
FROZEN_P = {1.0: 0.36602540378443865, 0.3: 0.07959935794377113, 0.1: 0.017912878474779202, 0.03: 0.0032516888037759195}


def scalar_game(lam, r_cross=None):
    """Two players on A=-1, B=1 with Q=λ, R=λ² and cross weight ``r_cross`` (default λ²)."""
    sys = LtiSystem([[-1.0]], [[1.0]])
    cost = CostWeights([[lam]], [[lam * lam]])
    rc = lam * lam if r_cross is None else r_cross
    R_cross = [[cost.R, np.array([[rc]])], [np.array([[rc]]), cost.R]]
    return CoupledProblem([(sys, cost), (sys, cost)], nzs_couplings([sys, sys], [cost.R, cost.R], R_cross))


def game_configs(lam, **kw):
    kw.setdefault("eps_bar", 1e-9)
    kw.setdefault("max_iters", 100_000)
    p0 = (math.sqrt(2.0) - 1.0) * lam
    return [default_node_config([[p0]], **kw) for _ in range(2)]


class TestCouplings:
    def test_nzs_zero_input(self):
        assert not coupling_nzs(np.eye(2), np.eye(2), np.zeros((2, 1)), [[1.0]], [[1.0]]).any()

    def test_nzs_zero_values(self):
        assert not coupling_nzs(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 1)), [[1.0]], [[1.0]]).any()

    def test_nzs_scalar(self):
        assert coupling_nzs([[1.0]], [[2.0]], [[1.0]], [[1.0]], [[1.0]]).item() == 0.0

    def test_nzs_class_matches_function(self):
        rng = np.random.default_rng(0)
        n = 3
        Bs = [rng.standard_normal((n, 2)) for _ in range(3)]
        Rs = [random_spd(rng, 2) for _ in range(3)]
        Rc = [random_spd(rng, 2) for _ in range(3)]
        Ps = [random_spd(rng, n) for _ in range(4)]
        got = NzsCoupling(Bs, Rs, Rc)(Ps[0], Ps[1:])
        ref = sum(coupling_nzs(Ps[0], Ps[j + 1], Bs[j], Rs[j], Rc[j]) for j in range(3))
        np.testing.assert_allclose(got, ref, atol=1e-12)
        assert np.array_equal(got, got.T)

    def test_unmatched_zero(self):
        assert coupling_unmatched([[1.0]], [[0.0]], [[1.0]], [[1.0]]).item() == 0.0

    def test_unmatched_scalar(self):
        assert coupling_unmatched([[1.0]], [[1.0]], [[1.0]], [[1.0]]).item() == 2.0

    def test_unmatched_symmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            P2 = symmetrize(rng.standard_normal((3, 3)))
            P1 = random_spd(rng, 2)
            out = coupling_unmatched(P2, P1, rng.standard_normal((2, 1)), [[1.5]])
            assert np.array_equal(out, out.T)

    def test_unmatched_mismatch(self):
        with pytest.raises(ValueError):
            coupling_unmatched(np.eye(3), np.eye(2), np.ones((2, 2)), np.eye(2))


class TestRun:
    def test_zero_coupling_bitwise(self):
        rng = np.random.default_rng(2)
        subs = []
        for n in (2, 3):
            subs.append((LtiSystem(random_hurwitz(rng, n), rng.standard_normal((n, 1))), CostWeights(random_spd(rng, n), [[1.0]])))
        prob = CoupledProblem.uncoupled(subs)
        configs = [ViConfig(np.zeros((n, n)), step=PowerStep(0.05, 0.6)) for n in (2, 3)]
        res = decentralized_vi_run(prob, configs)
        for run, (sys, cost), cfg in zip(res, subs, configs):
            assert traces_equal(run, vi_run(sys, cost, cfg))
        assert not res.step_halved

    @pytest.mark.parametrize("lam", LAMBDAS)
    def test_gain_assignment_sweep(self, lam):
        prob = scalar_game(lam)
        oracle = solve_coupled_oracle(prob)
        assert oracle.P_star[0].item() == pytest.approx(FROZEN_P[lam], rel=1e-10)
        res = decentralized_vi_run(prob, game_configs(lam))
        assert res.all_converged
        for P, P_or in zip(res.finals, oracle.P_star):
            assert fro(P - P_or) <= 1e-5
            assert np.array_equal(P, P.T)
        assert max(coupled_residuals(prob, res.finals)) <= 1e-6

    def test_unit_cross_weight_diverges(self):
        prob = scalar_game(0.1, r_cross=1.0)
        res = decentralized_vi_run(prob, game_configs(0.1))
        assert res.step_halved
        assert not res.all_converged
        assert any(run.terminated == "diverged" for run in res)
        with pytest.raises(ConvergenceError):
            solve_coupled_oracle(prob)

    def test_no_retry(self):
        res = decentralized_vi_run(scalar_game(0.1, r_cross=1.0), game_configs(0.1), retry_halved=False)
        assert not res.step_halved and not res.all_converged

    def test_max_iters(self):
        res = decentralized_vi_run(scalar_game(1.0), game_configs(1.0, max_iters=10))
        assert [run.terminated for run in res] == ["max_iters", "max_iters"]
        assert all(run.iterations == 10 for run in res)

    def test_default_configs(self):
        res = decentralized_vi_run(scalar_game(1.0))
        assert res.all_converged
        assert abs(res.finals[0].item() - FROZEN_P[1.0]) <= 1e-4

    def test_summary_csv(self, tmp_path):
        prob = scalar_game(0.3)
        res = decentralized_vi_run(prob, game_configs(0.3))
        path = write_node_summary_csv(res, coupled_residuals(prob, res.finals), tmp_path / "nodes.csv")
        lines = path.read_text().splitlines()
        assert len(lines) == 3


class TestOracle:
    def test_zero_coupling(self):
        rng = np.random.default_rng(3)
        subs = [(LtiSystem(random_hurwitz(rng, 2), rng.standard_normal((2, 1))), CostWeights(random_spd(rng, 2), [[1.0]])) for _ in range(2)]
        sol = solve_coupled_oracle(CoupledProblem.uncoupled(subs))
        for P, (sys, cost) in zip(sol.P_star, subs):
            assert fro(P - solve_are_kleinman(sys, cost).P_star) <= 1e-10

    def test_unmatched_small_input(self):
        sys = LtiSystem([[-1.0]], [[1.0]])
        cost = CostWeights([[1.0]], [[1.0]])
        B1 = np.array([[0.1]])
        prob = CoupledProblem.pair(
            (sys, cost),
            (sys, cost),
            lambda P1, P2: np.zeros((1, 1)),
            lambda P2, P1: coupling_unmatched(P2, P1, B1, cost.R),
        )
        sol = solve_coupled_oracle(prob, tol=1e-10)
        assert max(sol.residual_norms) <= 1e-10
        assert sol.P1_star.item() == pytest.approx(math.sqrt(2.0) - 1.0, abs=1e-12)
        # node 2 sees Q + 0.02 P1 P2: 2 (-1 + 0.01 P1) p - p² + 1 = 0
        a = -1.0 + 0.01 * sol.P1_star.item()
        assert sol.P2_star.item() == pytest.approx(a + math.sqrt(a * a + 1.0), abs=1e-12)

    def test_many_players(self):
        rng = np.random.default_rng(4)
        N = 4
        systems = [LtiSystem([[-1.0]], [[rng.uniform(0.5, 1.5)]]) for _ in range(N)]
        R_self = [np.array([[1.0]])] * N
        R_cross = [[np.array([[1.0 if i == j else 0.1]]) for j in range(N)] for i in range(N)]
        prob = CoupledProblem([(s, CostWeights([[1.0]], [[1.0]])) for s in systems], nzs_couplings(systems, R_self, R_cross))
        sol = solve_coupled_oracle(prob)
        assert max(sol.residual_norms) <= 1e-9
        res = decentralized_vi_run(prob, [default_node_config([[0.0]], eps_bar=1e-9) for _ in range(N)])
        assert res.all_converged
        assert max(fro(P - Q) for P, Q in zip(res.finals, sol.P_star)) <= 1e-5


@pytest.fixture(scope="module")
def game():
    prob = scalar_game(1.0)
    P_star = solve_coupled_oracle(prob).P_star
    radius = 0.5 * fro(P_star[0])
    return prob, P_star, radius, sample_ball(P_star, radius, 200, seed=0)


class TestGainBound:
    def test_sample_ball(self, game):
        _, P_star, radius, samples = game
        assert all(fro(P - C) <= radius * (1 + 1e-12) for tup in samples for P, C in zip(tup, P_star))

    def test_zero_coupling(self, game):
        _, P_star, _, samples = game
        sys, cost = LtiSystem([[-1.0]], [[1.0]]), CostWeights([[1.0]], [[1.0]])
        rep = gain_bound_report(CoupledProblem.uncoupled([(sys, cost), (sys, cost)]), samples, P_star)
        assert not rep.coeffs.any()

    def test_bound_holds_on_samples(self, game):
        prob, P_star, _, samples = game
        rep = gain_bound_report(prob, samples, P_star)
        base = [prob.delta(i, P_star) for i in range(2)]
        for Ps in samples:
            for i in range(2):
                bound = sum(rep.gamma(i, j, fro(Ps[j] - P_star[j])) for j in range(2))
                assert fro(prob.delta(i, Ps) - base[i]) <= bound + 1e-9

    def test_low_degree_dominates(self, game):
        prob, P_star, radius, samples = game
        c = gain_bound_report(prob, samples, P_star).coeffs
        low = (c[..., 0] * radius + c[..., 1] * radius**2).sum()
        cubic = (c[..., 2] * radius**3).sum()
        assert cubic <= 0.05 * low

    def test_linear_in_coupling_scale(self, game):
        prob, P_star, _, samples = game
        base = gain_bound_report(prob, samples, P_star).coeffs
        s = 3.0
        scaled = CoupledProblem(prob.nodes, [lambda P, o, c=c: s * c(P, o) for c in prob.couplings])
        np.testing.assert_allclose(gain_bound_report(scaled, samples, P_star).coeffs, s * base, rtol=1e-6, atol=1e-9)

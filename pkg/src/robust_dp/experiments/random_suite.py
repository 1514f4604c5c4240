"""Property suite over seeded random stable systems."""

from __future__ import annotations

import math
import time

import numpy as np

from ..adp import RegressorPair, rls_batch, rls_init, rls_step, theta_dims
from ..matcore import fro, is_hurwitz
from ..riccati import CostWeights, LtiSystem, integrate_dmre, scale_cost, solve_are_kleinman
from ..vi import ViConfig, vi_run
from .common import RunArtifact, finish, parallel_map, prepare_output, rel_err, seed_seq, write_rows

DEFAULTS = {
    "systems": 100,
    "n_max": 6,
    "m_max": 3,
    "eig_range": [1.0, 3.0],
    "similarity": 0.3,
    "tolerances": {"oracle_residual": 1e-9, "vi_rel_err": 1e-4, "scaling": 1e-8, "rls": 1e-8, "fit_r2": 0.99},
    "scaling_lambdas": [0.1, 1.0, 10.0],
    "rls_cases": 5,
    "dmre_cases": 5,
    "dmre": {"T": 30.0, "dt": 0.01, "offset": 0.1, "time_scale": 0.05},
}


def random_system(rng: np.random.Generator, n: int, m: int, eig_range=(1.0, 3.0), similarity: float = 0.3):
    """Hurwitz ``A`` with eigenvalues in ``-eig_range`` under a mild similarity; ``Q, R`` positive definite."""
    d = -rng.uniform(eig_range[0], eig_range[1], n)
    T = np.eye(n) + similarity * rng.standard_normal((n, n)) / math.sqrt(n)
    A = T @ np.diag(d) @ np.linalg.inv(T)
    B = rng.standard_normal((n, m))
    L = rng.standard_normal((n, n))
    Q = L @ L.T / n + 0.1 * np.eye(n)
    L = rng.standard_normal((m, m))
    R = L @ L.T / m + 0.1 * np.eye(m)
    return LtiSystem(A, B), CostWeights(Q, R)


def system_batch(seed: int, count: int, n_max: int = 6, m_max: int = 3, eig_range=(1.0, 3.0), similarity: float = 0.3):
    rng = np.random.default_rng(seed_seq(seed, 7))
    out = []
    for _ in range(count):
        n = int(rng.integers(1, n_max + 1))
        m = int(rng.integers(1, m_max + 1))
        out.append(random_system(rng, n, m, eig_range, similarity))
    return out


def scalar_are(a: float, b: float, q: float, r: float) -> float:
    """Stabilizing root of ``2 a p - p^2 b^2 / r + q = 0``."""
    return r * (a + math.sqrt(a * a + b * b * q / r)) / (b * b)


def _check_system(args):
    sys, cost, tol = args
    sol = solve_are_kleinman(sys, cost)
    bound = tol["oracle_residual"] * max(1.0, fro(sol.P_star))
    oracle_ok = sol.residual_norm <= bound and is_hurwitz(sys.A - sys.B @ sol.K_star)
    run = vi_run(sys, cost, ViConfig(np.zeros((sys.n, sys.n))))
    err = rel_err(run.final, sol.P_star)
    return sol.residual_norm / max(1.0, fro(sol.P_star)), oracle_ok, err, run.restarts, run.converged


def suite_checks(seed: int, p: dict) -> list[tuple[str, bool, float]]:
    """``(name, passed, worst value)`` rows; the worst value is the statistic compared with the tolerance."""
    tol = p["tolerances"]
    rows = []

    # n = 1 closed form
    worst = 0.0
    for a, b, q, r in [(-1.0, 1.0, 1.0, 1.0), (0.5, 2.0, 3.0, 0.5), (-2.0, 0.3, 0.1, 4.0), (0.0, 1.0, 1.0, 1.0)]:
        exact = scalar_are(a, b, q, r)
        sys, cost = LtiSystem([[a]], [[b]]), CostWeights([[q]], [[r]])
        K0 = None if a < 0 else [[(abs(a) + 1.0) / b]]
        got = solve_are_kleinman(sys, cost, K0=K0).P_star.item()
        run = vi_run(sys, cost, ViConfig(np.zeros((1, 1))))
        worst = max(worst, abs(got - exact) / exact, abs(run.final.item() - exact) / exact)
    rows.append(("scalar_closed_form", worst <= tol["vi_rel_err"], worst))

    systems = system_batch(seed, int(p["systems"]), int(p["n_max"]), int(p["m_max"]), p["eig_range"], p["similarity"])
    results = parallel_map(_check_system, [(s, c, tol) for s, c in systems])
    rows.append(("oracle_fidelity", all(r[1] for r in results), max(r[0] for r in results)))
    rows.append(
        (
            "vi_convergence",
            all(r[2] <= tol["vi_rel_err"] and r[3] == 0 for r in results),
            max(r[2] for r in results),
        )
    )

    worst = 0.0
    for sys, cost in systems[:20]:
        base = solve_are_kleinman(sys, cost)
        for lam in p["scaling_lambdas"]:
            sol = solve_are_kleinman(sys, scale_cost(cost, lam))
            worst = max(
                worst,
                fro(sol.K_star - base.K_star) / max(1.0, fro(base.K_star)),
                fro(sol.P_star - lam * base.P_star) / fro(lam * base.P_star),
            )
    rows.append(("scaling_invariance", worst <= tol["scaling"], worst))

    rng = np.random.default_rng(seed_seq(seed, 8))
    worst = 0.0
    for sys, _ in systems[: int(p["rls_cases"])]:
        q, _, pdim = theta_dims(sys.n, sys.m)
        state = rls_init(sys.n, sys.m)
        pairs = []
        for _ in range(3 * q):
            pairs.append(RegressorPair(rng.standard_normal(pdim), rng.standard_normal(q)))
            state = rls_step(state, pairs[-1])
            ref = rls_batch(pairs)
            worst = max(worst, float(np.max(np.abs(state.M - ref))) / max(1.0, float(np.max(np.abs(ref)))))
    rows.append(("rls_batch_equivalence", worst <= tol["rls"], worst))

    worst_r2 = 1.0
    slopes_ok = True
    dm = p["dmre"]
    for fast, cost in systems[: int(p["dmre_cases"])]:
        # slow the plant down (A, B -> cA, cB) so the error stays above rounding over T
        sys = LtiSystem(dm["time_scale"] * fast.A, dm["time_scale"] * fast.B)
        sol = solve_are_kleinman(sys, cost)
        P0 = sol.P_star + dm["offset"] * np.eye(sys.n)
        traj = integrate_dmre(sys, cost, P0, dm["T"], dm["dt"])
        slope, r2 = log_error_fit(traj.t, traj.P, sol.P_star)
        worst_r2 = min(worst_r2, r2)
        slopes_ok &= slope < 0
    rows.append(("dmre_exponential", slopes_ok and worst_r2 >= tol["fit_r2"], worst_r2))
    return rows


def log_error_fit(t, Ps, P_star, floor: float = 1e-13) -> tuple[float, float]:
    """Least-squares line through ``log ||P(t) - P*||`` over the final half.

    Samples whose error is at rounding level (below ``floor``) are dropped.
    Returns ``(slope, R^2)``.
    """
    t = np.asarray(t)
    err = np.array([fro(P - P_star) for P in Ps])
    half = t >= t[-1] / 2
    keep = half & (err > floor)
    if keep.sum() < 3:
        keep = half
    x, y = t[keep], np.log(np.maximum(err[keep], 1e-300))
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def run_random_suite(cfg: dict) -> RunArtifact:
    started = time.perf_counter()
    out = prepare_output(cfg)
    art = RunArtifact(cfg, out)
    rows = suite_checks(cfg["seed"], cfg["params"])
    art.files.append(write_rows(out / "suite.csv", ["check", "passed", "value"], ([n, str(ok).lower(), v] for n, ok, v in rows)))
    art.checks = {n: bool(ok) for n, ok, _ in rows}
    art.summary = {n: v for n, _, v in rows}
    return finish(art, started)

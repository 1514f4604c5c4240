"""Mean-variance portfolio as a many-player game solved by decentralized value iteration."""

from __future__ import annotations

import time

import numpy as np

from ..adp import noisy_model_drift
from ..decentralized import (
    CoupledProblem,
    coupled_residuals,
    decentralized_vi_run,
    nzs_couplings,
    solve_coupled_oracle,
    write_node_summary_csv,
)
from ..riccati import CostWeights, LtiSystem
from ..vi import PowerStep, ViConfig, write_trace_csv
from .common import RunArtifact, finish, prepare_output, seed_seq, write_rows

DEFAULTS = {
    "market": {"stocks": 20, "r": 0.025, "b_max": 0.15, "volatility": 0.2, "wealth0": 100.0, "gamma": 200.0},
    "cost": {"Q": 1e-3, "R_self": 1e-3, "R_cross": 1e-4},
    "estimation": {"rate_noise": 0.02},
    "vi": {"h0": 1.0, "alpha": 0.6, "eps_bar": 1e-10, "max_iters": 5000, "trace_every": 1},
    "simulation": {"years": 5.0, "steps_per_year": 252, "paths": 200},
    "checks": {"converged": True, "higher_return": True, "variance_ratio": 1.2},
}


def build_game(p: dict, seed: int) -> tuple[CoupledProblem, np.ndarray]:
    """Scalar players sharing the wealth deviation; returns the problem and the rates ``b``."""
    mk, c = p["market"], p["cost"]
    N, r = int(mk["stocks"]), float(mk["r"])
    rng = np.random.default_rng(seed_seq(seed, 1))
    # b in (r, b_max]
    b = mk["b_max"] - rng.uniform(0.0, mk["b_max"] - r, N)
    systems = [LtiSystem([[r]], [[bi - r]]) for bi in b]
    costs = [CostWeights([[c["Q"]]], [[c["R_self"]]]) for _ in range(N)]
    R_cross = [[np.array([[c["R_self"] if i == j else c["R_cross"]]]) for j in range(N)] for i in range(N)]
    prob = CoupledProblem(list(zip(systems, costs)), nzs_couplings(systems, [co.R for co in costs], R_cross))
    return prob, b


def simulate_wealth(
    B: np.ndarray, weights: dict[str, np.ndarray], p: dict, seed: int
) -> tuple[np.ndarray, dict[str, np.ndarray], np.ndarray]:
    """Paired Euler paths of the wealth under each allocation rule.

    ``weights[name]`` holds per-asset gains ``k`` so that the holding in asset
    ``i`` is ``k_i (gamma - x)``.  Returns times, wealth arrays (steps+1, paths)
    and the stock prices of the first path.
    """
    mk, sim = p["market"], p["simulation"]
    dt = 1.0 / sim["steps_per_year"]
    steps = int(round(sim["years"] * sim["steps_per_year"]))
    paths = int(sim["paths"])
    N = len(B)
    r, vol, gamma = mk["r"], mk["volatility"], mk["gamma"]
    dw = np.random.default_rng(seed_seq(seed, 3)).standard_normal((steps, paths, N)) * np.sqrt(dt)
    out = {}
    for name, k in weights.items():
        x = np.empty((steps + 1, paths))
        x[0] = mk["wealth0"]
        for j in range(steps):
            u = np.outer(gamma - x[j], k)
            x[j + 1] = x[j] + (r * x[j] + u @ B) * dt + vol * np.einsum("pi,pi->p", u, dw[j])
        out[name] = x
    prices = np.empty((steps + 1, N))
    prices[0] = 1.0
    b = B + r
    for j in range(steps):
        prices[j + 1] = prices[j] * (1.0 + b * dt + vol * dw[j, 0])
    return np.arange(steps + 1) * dt, out, prices


def run_example_portfolio(cfg: dict) -> RunArtifact:
    started = time.perf_counter()
    p = cfg["params"]
    seed = cfg["seed"]
    out = prepare_output(cfg)
    art = RunArtifact(cfg, out)
    prob, b = build_game(p, seed)
    N = len(b)
    B_true = b - p["market"]["r"]
    vi = p["vi"]
    configs = [
        ViConfig(
            np.zeros((1, 1)),
            step=PowerStep(vi["h0"], vi["alpha"]),
            eps_bar=vi["eps_bar"],
            max_iters=int(vi["max_iters"]),
            trace_every=int(vi["trace_every"]),
        )
        for _ in range(N)
    ]
    noise = float(p["estimation"]["rate_noise"])
    latest = [None] * N

    def factory(i):
        def make():
            sys, cost = prob.nodes[i]
            rng = np.random.default_rng(seed_seq(seed, 10, i))
            d = noisy_model_drift(sys, cost, (), noise, rng, "time_averaged", input_dirs=[[[1.0]]])
            latest[i] = d
            return d

        return make

    res = decentralized_vi_run(prob, configs, drifts=[factory(i) for i in range(N)])
    P = np.array([run.final.item() for run in res])
    B_hat = np.array([latest[i].estimate()[1].item() for i in range(N)])
    R_self = p["cost"]["R_self"]
    K = B_hat * P / R_self
    oracle = solve_coupled_oracle(prob)
    P_or = np.array([Pi.item() for Pi in oracle.P_star])
    K_or = B_true * P_or / R_self
    residuals = coupled_residuals(prob, [np.array([[v]]) for v in P])

    uniform = np.full(N, K.mean())
    t, wealth, prices = simulate_wealth(B_true, {"learned": K, "uniform": uniform}, p, seed)
    rets = {name: np.diff(x, axis=0) / x[:-1] for name, x in wealth.items()}
    mean = {name: float(v.mean()) for name, v in rets.items()}
    var = {name: float(v.var(ddof=1)) for name, v in rets.items()}

    art.files += [
        write_node_summary_csv(res, residuals, out / "nodes.csv"),
        write_trace_csv(res[0], out / "trace_node1.csv"),
        write_rows(
            out / "allocation.csv",
            ["asset", "b", "B_hat", "P", "K", "P_oracle", "K_oracle"],
            ([i + 1, b[i], B_hat[i], P[i], K[i], P_or[i], K_or[i]] for i in range(N)),
        ),
        write_rows(
            out / "wealth.csv",
            ["t", "learned", "uniform"],
            ([tj, wl, wu] for tj, wl, wu in zip(t, wealth["learned"][:, 0], wealth["uniform"][:, 0])),
        ),
        write_rows(out / "prices.csv", ["t", *(f"S{i + 1}" for i in range(N))], ([tj, *row] for tj, row in zip(t, prices))),
    ]

    chk = p["checks"]
    ratio = var["learned"] / var["uniform"]
    art.summary = {
        "b": b,
        "B_hat": B_hat,
        "P": P,
        "K": K,
        "P_oracle": P_or,
        "K_oracle": K_or,
        "max_rel_gain_gap": float(np.max(np.abs(K - K_or) / np.abs(K_or))),
        "coupled_residuals": residuals,
        "iterations": [run.iterations for run in res],
        "status": [run.terminated for run in res],
        "step_halved": res.step_halved,
        "mean_return": mean,
        "return_variance": var,
        "variance_ratio": ratio,
    }
    if chk["converged"]:
        art.checks["converged"] = res.all_converged
    if chk["higher_return"]:
        art.checks["higher_return"] = mean["learned"] >= mean["uniform"]
    art.checks["variance_ratio"] = ratio <= chk["variance_ratio"]
    return finish(art, started)

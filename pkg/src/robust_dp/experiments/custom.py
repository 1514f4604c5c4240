"""User-supplied plant: oracle plus (robust) value iteration."""

from __future__ import annotations

import time

import numpy as np

from ..matcore import symmetrize
from ..riccati import CostWeights, LtiSystem, solve_are_kleinman
from ..vi import DisturbanceHook, DoublingBoundary, PowerStep, ViConfig, robust_vi_run, write_trace_csv
from .common import ConfigError, RunArtifact, finish, prepare_output, rel_err, write_rows

DEFAULTS = {
    "A": [[-1.0, 0.5], [0.0, -2.0]],
    "B": [[1.0], [0.3]],
    "Q": [[1.0, 0.0], [0.0, 1.0]],
    "R": [[1.0]],
    "K0": None,
    "P0": None,
    "vi": {"h0": 0.1, "alpha": 0.6, "eps_bar": 1e-6, "max_iters": 1000000, "trace_every": 1, "B0": None},
    "disturbance": {"kind": "none", "scale": 1.0, "frequency": 0.01},
    "checks": {"rel_err": 1e-4},
}

KINDS = ("none", "vanishing", "sinusoid", "noise")


def disturbance_hook(spec: dict, n: int) -> DisturbanceHook:
    """``vanishing``: ``s I / (k + 1)``; ``sinusoid``: ``s sin(w k) I``; ``noise``: symmetric Gaussian ``s W_k``.

    Noise draws come from the run's stream (``ViConfig.seed``).
    """
    kind, s = spec["kind"], float(spec["scale"])
    if kind not in KINDS:
        raise ConfigError(f"disturbance.kind must be one of {KINDS}")
    eye = np.eye(n)
    if kind == "vanishing":
        return DisturbanceHook(delta=lambda k, P: (s / (k + 1)) * eye)
    if kind == "sinusoid":
        w = float(spec["frequency"])
        return DisturbanceHook(delta=lambda k, P: (s * np.sin(w * k)) * eye)
    if kind == "noise":
        return DisturbanceHook(noise=lambda k, P, rng: s * symmetrize(rng.standard_normal((n, n))))
    return DisturbanceHook.null()


def run_custom(cfg: dict) -> RunArtifact:
    started = time.perf_counter()
    p = cfg["params"]
    out = prepare_output(cfg)
    art = RunArtifact(cfg, out)
    try:
        sys = LtiSystem(p["A"], p["B"])
        cost = CostWeights(p["Q"], p["R"])
        cost.check(sys)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad plant or weights: {exc}") from exc
    n = sys.n
    oracle = solve_are_kleinman(sys, cost, K0=p["K0"])
    vi = p["vi"]
    P0 = np.zeros((n, n)) if p["P0"] is None else np.asarray(p["P0"], dtype=float)
    config = ViConfig(
        P0,
        step=PowerStep(vi["h0"], vi["alpha"]),
        boundary=None if vi["B0"] is None else DoublingBoundary(vi["B0"]),
        eps_bar=vi["eps_bar"],
        max_iters=int(vi["max_iters"]),
        trace_every=int(vi["trace_every"]),
        seed=cfg["seed"],
    )
    run = robust_vi_run(sys, cost, config, disturbance_hook(p["disturbance"], n))
    err = rel_err(run.final, oracle.P_star)
    art.files += [
        write_trace_csv(run, out / "trace.csv"),
        write_rows(out / "oracle.csv", [f"P{i + 1}{j + 1}" for i in range(n) for j in range(n)], [oracle.P_star.ravel()]),
    ]
    art.summary = {
        "P_star": oracle.P_star,
        "K_star": oracle.K_star,
        "P_final": run.final,
        "rel_err": err,
        "iterations": run.iterations,
        "restarts": run.restarts,
        "terminated": run.terminated,
    }
    art.checks["rel_err"] = err <= p["checks"]["rel_err"]
    return finish(art, started)

"""Value iteration on the Riccati flow: baseline, robust and dynamically coupled runners.

Every runner in the package goes through :func:`iterate`, which implements the
step / boundary / restart / termination logic once.  Runners differ only in
the drift they supply (model-based Riccati operator, learned model, sampled
noisy model, ...) and in the perturbations they inject.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Protocol

import numpy as np
from scipy.linalg.lapack import dpotrf

from .matcore import as_matrix, fro, symmetrize, vecs
from .riccati import CostWeights, LtiSystem

__all__ = [
    "PowerStep",
    "DoublingBoundary",
    "ViConfig",
    "TraceRow",
    "ViRun",
    "DisturbanceHook",
    "DynamicUncertainty",
    "riccati_drift",
    "vi_step",
    "iterate",
    "vi_run",
    "robust_vi_run",
    "coupled_vi_run",
    "write_trace_csv",
]

Termination = Literal["converged", "max_iters", "diverged"]


@dataclass(frozen=True)
class PowerStep:
    """Step schedule ``h_k = h0 / (1 + k)^alpha``."""

    h0: float = 0.1
    alpha: float = 0.6

    def __post_init__(self):
        if self.h0 <= 0:
            raise ValueError("h0 must be positive")
        if not 0.0 < self.alpha <= 1.0:
            # alpha <= 1 keeps sum h_k divergent
            raise ValueError("alpha must lie in (0, 1]")

    def __call__(self, k: int) -> float:
        return self.h0 / (1.0 + k) ** self.alpha

    @property
    def square_summable(self) -> bool:
        return self.alpha > 0.5


@dataclass(frozen=True)
class DoublingBoundary:
    """Boundary schedule ``B_q = B0 * 2^q``."""

    B0: float

    def __post_init__(self):
        if self.B0 <= 0:
            raise ValueError("B0 must be positive")

    def __call__(self, q: int) -> float:
        try:
            return math.ldexp(self.B0, q)
        except OverflowError:
            return math.inf


StepSchedule = Callable[[int], float]
BoundarySchedule = Callable[[int], float]


@dataclass
class ViConfig:
    """Settings shared by all value-iteration runners.

    Parameters
    ----------
    P0 : initial symmetric matrix, positive semidefinite.
    step : map ``k -> h_k``.
    boundary : map ``q -> B_q``; defaults to doubling from ``10 (1 + ||P0||_F)``.
    eps_bar : termination threshold on ``||P_{k+1/2} - P_k - h_k(Δ_k + W_k)|| / h_k``.
    max_iters : iteration cap, reported as ``max_iters`` when hit.
    trace_every : record every ``trace_every``-th iterate (the last one is always kept).
    max_restarts : restarts allowed before the run is reported ``diverged``
        (``None`` for no limit).
    seed : seed of the run's random stream (used by noise hooks and noisy models).
    """

    P0: np.ndarray
    step: StepSchedule = field(default_factory=PowerStep)
    boundary: BoundarySchedule | None = None
    eps_bar: float = 1e-6
    max_iters: int = 1_000_000
    trace_every: int = 1
    max_restarts: int | None = None
    seed: int | None = None

    def __post_init__(self):
        self.P0 = symmetrize(as_matrix(self.P0))
        if np.linalg.eigvalsh(self.P0).min() < -1e-12 * max(1.0, fro(self.P0)):
            raise ValueError("P0 must be positive semidefinite")
        if self.boundary is None:
            self.boundary = DoublingBoundary(10.0 * (1.0 + fro(self.P0)))
        if self.eps_bar <= 0:
            raise ValueError("eps_bar must be positive")
        if self.max_iters < 1 or self.trace_every < 1:
            raise ValueError("max_iters and trace_every must be >= 1")


class TraceRow(tuple):
    """``(k, q, h, P, residual)``; ``residual`` is the Frobenius norm of the drift at ``P``."""

    __slots__ = ()

    def __new__(cls, k, q, h, P, residual):
        return super().__new__(cls, (k, q, h, P, residual))

    def __getnewargs__(self):
        return tuple(self)

    k = property(lambda self: self[0])
    q = property(lambda self: self[1])
    h = property(lambda self: self[2])
    P = property(lambda self: self[3])
    residual = property(lambda self: self[4])


@dataclass
class ViRun:
    trace: list[TraceRow]
    restarts: int
    terminated: Termination
    final: np.ndarray
    iterations: int

    @property
    def converged(self) -> bool:
        return self.terminated == "converged"

    def trace_matrices(self) -> np.ndarray:
        return np.array([row.P for row in self.trace])

    def trace_steps(self) -> np.ndarray:
        return np.array([row.k for row in self.trace])


class DisturbanceHook:
    """Perturbations injected into the robust update.

    ``delta(k, P)`` returns the deterministic term ``Δ_k`` and
    ``noise(k, P, rng)`` the stochastic term ``W_k``.  Either may be ``None``.
    """

    def __init__(self, delta=None, noise=None):
        self.delta = delta
        self.noise = noise

    @classmethod
    def null(cls) -> "DisturbanceHook":
        return cls()


def _pd(M: np.ndarray, norm: float) -> bool:
    # is_pd without the redundant finiteness and norm passes
    L, info = dpotrf(M, lower=1, clean=0)
    if info != 0:
        return False
    d = L.diagonal().min()
    return bool(d * d > 1e-10 * max(1.0, norm))


class Drift(Protocol):
    def __call__(self, k: int, P: np.ndarray) -> np.ndarray: ...


def riccati_drift(sys: LtiSystem, cost: CostWeights) -> Drift:
    """Model-based drift ``k, P -> A^T P + P A - P B R^{-1} B^T P + Q``."""
    cost.check(sys)
    At = sys.A.T.copy()
    S = symmetrize(sys.B @ cost.Rinv @ sys.B.T)
    Q = cost.Q

    def drift(k, P):
        AtP = At @ P
        PS = P @ S
        return AtP + AtP.T - PS @ P + Q

    return drift


def vi_step(P_k, sys: LtiSystem, cost: CostWeights, h_k: float, delta=None, noise=None) -> np.ndarray:
    """Half step ``P_k + h_k (R(P_k) + Δ_k + W_k)``, symmetrized."""
    if h_k <= 0:
        raise ValueError("h_k must be positive")
    P = symmetrize(as_matrix(P_k, sys.n, sys.n))
    D = riccati_drift(sys, cost)(0, P)
    if delta is not None:
        D = D + as_matrix(delta, sys.n, sys.n)
    if noise is not None:
        D = D + as_matrix(noise, sys.n, sys.n)
    return symmetrize(P + h_k * D)


def iterate(
    drift: Drift,
    config: ViConfig,
    delta: Callable[[int, np.ndarray], np.ndarray] | None = None,
    noise: Callable[[int, np.ndarray, np.random.Generator], np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
) -> ViRun:
    """Generic robust value-iteration loop.

    At step ``k`` the half step ``P_{k+1/2} = P_k + h_k (D_k + Δ_k + W_k)`` is
    formed, where ``D_k = drift(k, P_k)``.  If it is positive definite and
    ``||P_{k+1/2} - P_k - h_k (Δ_k + W_k)|| / h_k < eps_bar`` the run stops and
    returns ``P_k``.  Otherwise it either accepts the half step or, when the
    half step leaves the ball of radius ``B_q`` or is not positive definite,
    restarts from ``P0`` with ``q + 1``.  ``k`` advances in both cases.
    """
    P0 = config.P0
    P = P0.copy()
    step = config.step
    boundary = config.boundary
    eps = config.eps_bar
    every = config.trace_every
    max_restarts = config.max_restarts
    if noise is not None and rng is None:
        rng = np.random.default_rng(config.seed)

    trace: list[TraceRow] = []
    q = 0
    Bq = boundary(0)
    status: Termination = "max_iters"
    k = 0
    for k in range(config.max_iters):
        h = step(k)
        D = drift(k, P)
        extra = None
        if delta is not None:
            extra = symmetrize(delta(k, P))
        if noise is not None:
            W = symmetrize(noise(k, P, rng))
            extra = W if extra is None else extra + W
        total = D if extra is None else D + extra
        half = P + h * total
        half = (half + half.T) * 0.5

        if k % every == 0:
            trace.append(TraceRow(k, q, h, P, fro(D)))

        nrm = fro(half)
        pd = math.isfinite(nrm) and _pd(half, nrm)
        if pd:
            diff = half - P if extra is None else half - P - h * extra
            if fro(diff) / h < eps:
                status = "converged"
                break
        if not pd or nrm > Bq:
            q += 1
            if max_restarts is not None and q > max_restarts:
                status = "diverged"
                break
            Bq = boundary(q)
            P = P0.copy()
        else:
            P = half
    else:
        k = config.max_iters
    if not trace or trace[-1].k != k:
        trace.append(TraceRow(k, q, step(k), P, fro(drift(k, P)) if status == "converged" else math.nan))
    return ViRun(trace=trace, restarts=q, terminated=status, final=P, iterations=k)


def vi_run(sys: LtiSystem, cost: CostWeights, config: ViConfig) -> ViRun:
    """Baseline value iteration (no perturbations)."""
    return robust_vi_run(sys, cost, config, DisturbanceHook.null())


def robust_vi_run(
    sys: LtiSystem, cost: CostWeights, config: ViConfig, hooks: DisturbanceHook | None = None
) -> ViRun:
    """Robust value iteration with ``Δ_k`` and ``W_k`` injected by ``hooks``."""
    if config.P0.shape != (sys.n, sys.n):
        raise ValueError(f"P0 has shape {config.P0.shape}, expected {(sys.n, sys.n)}")
    hooks = hooks or DisturbanceHook.null()
    return iterate(riccati_drift(sys, cost), config, delta=hooks.delta, noise=hooks.noise)


@dataclass
class DynamicUncertainty:
    """Dynamic uncertainty ``M_{k+1} = Π(M_k + h_k f(M_k, P_k))`` feeding ``Δ_k = delta_out(P_k, M_k)``.

    ``Π`` scales ``M - M_star`` radially back onto the ball of radius ``radius``.
    """

    M0: np.ndarray
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    delta_out: Callable[[np.ndarray, np.ndarray], np.ndarray]
    radius: float
    M_star: np.ndarray

    def __post_init__(self):
        self.M0 = np.atleast_2d(np.asarray(self.M0, dtype=float))
        self.M_star = np.atleast_2d(np.asarray(self.M_star, dtype=float))
        if self.M0.shape != self.M_star.shape:
            raise ValueError("M0 and M_star must have the same shape")
        if self.radius <= 0:
            raise ValueError("projection radius must be positive")

    def project(self, M: np.ndarray) -> np.ndarray:
        dev = M - self.M_star
        r = fro(dev)
        if r <= self.radius:
            return M
        return self.M_star + dev * (self.radius / r)


def coupled_vi_run(
    sys: LtiSystem, cost: CostWeights, config: ViConfig, unc: DynamicUncertainty
) -> tuple[ViRun, np.ndarray]:
    """Robust VI interconnected with a dynamic uncertainty.

    Returns the run and the sequence ``M_0, M_1, ...`` (one entry per iteration).
    """
    if config.P0.shape != (sys.n, sys.n):
        raise ValueError(f"P0 has shape {config.P0.shape}, expected {(sys.n, sys.n)}")
    M = unc.project(unc.M0.copy())
    Ms = []
    step = config.step

    def delta(k, P):
        nonlocal M
        Ms.append(M)
        D = unc.delta_out(P, M)
        M = unc.project(M + step(k) * np.asarray(unc.f(M, P), dtype=float))
        return D

    run = iterate(riccati_drift(sys, cost), config, delta=delta)
    return run, np.array(Ms)


def write_trace_csv(run: ViRun, path) -> Path:
    """Write ``k, q, h, vecs(P)..., residual`` rows with round-trip float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = run.final.shape[0]
    labels = [f"P{i + 1}{j + 1}" for i in range(n) for j in range(i, n)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "q", "h", *labels, "residual"])
        for row in run.trace:
            w.writerow([row.k, row.q, repr(float(row.h)), *map(_fmt, vecs(row.P)), _fmt(row.residual)])
    return path


def _fmt(x: float) -> str:
    return repr(float(x))

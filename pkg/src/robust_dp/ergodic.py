"""Linear SDE simulation and data-driven value iteration for ergodic LQ control."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .matcore import as_matrix, bar_matrix, sym_dim, vecs
from .riccati import CostWeights, LtiSystem
from .vi import ViConfig, ViRun, iterate

__all__ = [
    "SdeBlowUp",
    "SingularGramError",
    "SdeSystem",
    "ExplorationPolicy",
    "SdePath",
    "ErgodicConfig",
    "ErgodicRun",
    "PathIntegrals",
    "regressor",
    "ergodic_theta",
    "simulate_sde",
    "estimate_theta",
    "empirical_gram_check",
    "ergodic_adp_run",
    "write_path_csv",
    "read_path_csv",
]


class SdeBlowUp(FloatingPointError):
    def __init__(self, time: float):
        super().__init__(f"SDE state became non-finite at t = {time:.6g}")
        self.time = time


class SingularGramError(np.linalg.LinAlgError):
    """The regressor Gram matrix is not invertible at the requested time."""

    def __init__(self, t: float, min_eig: float):
        super().__init__(
            f"regressor Gram matrix is singular at t = {t:.6g} (min eigenvalue {min_eig:.3g}); "
            "use a later first update time or more exploration"
        )
        self.t = t
        self.min_eig = min_eig


@dataclass(frozen=True)
class SdeSystem:
    """``dx = A x dt + B u dt + sum_i sigma_i dw_i``; ``sigma_x`` has one row per direction."""

    plant: LtiSystem
    sigma_x: np.ndarray

    def __post_init__(self):
        sig = np.asarray(self.sigma_x, dtype=float)
        if sig.size == 0:
            sig = np.zeros((0, self.plant.n))
        sig = np.atleast_2d(sig)
        if sig.shape[1] != self.plant.n:
            raise ValueError("each noise direction must have length n")
        object.__setattr__(self, "sigma_x", sig)

    @property
    def n(self) -> int:
        return self.plant.n

    @property
    def m(self) -> int:
        return self.plant.m

    def ito_term(self, P) -> float:
        """``sum_i sigma_i^T P sigma_i``, the optimal ergodic cost when ``P = P*``."""
        return float(np.einsum("ij,jk,ik->", self.sigma_x, np.asarray(P, dtype=float), self.sigma_x))


@dataclass(frozen=True)
class ExplorationPolicy:
    """``du = -K0 dx - beta (u + K0 x) dt + sum_i sigma_u_i dw_u_i``.

    With ``reversion`` (``beta``) equal to zero the exploration ``u + K0 x`` is
    a Brownian motion and the joint process has no stationary law; ``beta > 0``
    turns it into an Ornstein-Uhlenbeck process.
    """

    K0: np.ndarray
    sigma_u: np.ndarray
    reversion: float = 0.0

    def __post_init__(self):
        K0 = np.atleast_2d(np.asarray(self.K0, dtype=float))
        sig = np.asarray(self.sigma_u, dtype=float)
        if sig.size == 0:
            sig = np.zeros((0, K0.shape[0]))
        sig = np.atleast_2d(sig)
        if sig.shape[1] != K0.shape[0]:
            raise ValueError("each exploration direction must have length m")
        if self.reversion < 0:
            raise ValueError("reversion must be nonnegative")
        object.__setattr__(self, "K0", K0)
        object.__setattr__(self, "sigma_u", sig)


@dataclass(frozen=True)
class SdePath:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray

    def index_at(self, t: float) -> int:
        """Index of the last sample with time ``<= t`` (with a half-step tolerance)."""
        j = int(np.searchsorted(self.t, t + 1e-9 * max(1.0, abs(t)), side="right")) - 1
        if j < 1:
            raise ValueError(f"time {t} is before the second sample")
        if t > self.t[-1] + 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is beyond the simulated horizon {self.t[-1]}")
        return j


def simulate_sde(
    sys: SdeSystem,
    pol: ExplorationPolicy,
    T: float,
    dt: float = 1e-3,
    seed: int | None = None,
    x0=None,
) -> SdePath:
    """Euler-Maruyama for the joint ``(x, u)`` diffusion.

    ``x(0)`` is deterministic (zero by default) and ``u(0) = -K0 x(0)``.
    """
    if dt <= 0 or T <= 0:
        raise ValueError("need dt > 0 and T > 0")
    A, B = sys.plant.A, sys.plant.B
    n, m = sys.n, sys.m
    K0 = as_matrix(pol.K0, m, n)
    N = int(round(T / dt))
    rng = np.random.default_rng(seed)
    qx, qu = len(sys.sigma_x), len(pol.sigma_u)
    xi = rng.standard_normal((N, qx + qu)) * np.sqrt(dt)
    # joint increment: dx = (Ax + Bu) dt + Sx dW_x, du = -K0 dx - beta (u + K0 x) dt + Su dW_u
    F = np.vstack([np.hstack([A, B]), -K0 @ np.hstack([A, B])])
    F[n:] -= pol.reversion * np.hstack([K0, np.eye(m)])
    G = np.zeros((n + m, qx + qu))
    G[:n, :qx] = sys.sigma_x.T
    G[n:, :qx] = -K0 @ sys.sigma_x.T
    G[n:, qx:] = pol.sigma_u.T
    Fd = np.eye(n + m) + dt * F
    noise = xi @ G.T

    y = np.empty((N + 1, n + m))
    x_init = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel()
    y[0, :n] = x_init
    y[0, n:] = -K0 @ x_init
    FdT = Fd.T
    cur = y[0]
    for j in range(N):
        cur = cur @ FdT + noise[j]
        y[j + 1] = cur
    if not np.all(np.isfinite(y)):
        bad = int(np.argmax(~np.all(np.isfinite(y), axis=1)))
        raise SdeBlowUp(bad * dt)
    t = np.arange(N + 1) * dt
    return SdePath(t, y[:, :n].copy(), y[:, n:].copy())


def regressor(x, u) -> np.ndarray:
    """Row-wise ``psi(x, u) = [xbar, x ⊗ u, 1]``."""
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    kron = (x[:, :, None] * u[:, None, :]).reshape(len(x), -1)
    return np.hstack([bar_matrix(x), kron, np.ones((len(x), 1))])


def ergodic_theta(P, sys: SdeSystem) -> np.ndarray:
    """Coefficients ``c`` with ``psi(x,u)^T c`` equal to the drift of ``x^T P x``.

    The middle block is ``2 ves(B^T P)`` because the cross term in the drift is
    ``2 x^T P B u``.
    """
    A, B = sys.plant.A, sys.plant.B
    P = as_matrix(P, sys.n, sys.n)
    AtP = A.T @ P
    # (x ⊗ u) uses row-major pairs (i, l), matching the entries of P B read row by row
    return np.concatenate([vecs(AtP + AtP.T), 2.0 * (P @ B).ravel(), [sys.ito_term(P)]])


def _window_sums(path: SdePath, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    # trapezoidal Gram and left-point cross sums over samples lo..hi
    t = path.t[lo : hi + 1]
    psi = regressor(path.x[lo : hi + 1], path.u[lo : hi + 1])
    dts = np.diff(t)
    w = np.zeros(len(t))
    w[:-1] += 0.5 * dts
    w[1:] += 0.5 * dts
    G = (psi * w[:, None]).T @ psi
    xbar = bar_matrix(path.x[lo : hi + 1])
    C = psi[:-1].T @ np.diff(xbar, axis=0)
    return G, C


class PathIntegrals:
    """Cumulative Gram ``∫ψψ^T dt`` and cross term ``Σ ψ_j Δxbar_j^T`` at given sample indices.

    ``C @ vecs(P)`` equals ``Σ_j ψ(t_j) (x_{j+1}^T P x_{j+1} - x_j^T P x_j)``.
    """

    def __init__(self, path: SdePath, indices: Sequence[int]):
        idx = np.asarray(indices, dtype=int)
        if np.any(np.diff(idx) <= 0) or idx[0] < 1:
            raise ValueError("indices must be increasing and >= 1")
        self.path = path
        self.indices = idx
        r = regressor(path.x[:1], path.u[:1]).shape[1]
        p = sym_dim(path.x.shape[1])
        self.G = np.empty((len(idx), r, r))
        self.C = np.empty((len(idx), r, p))
        G = np.zeros((r, r))
        C = np.zeros((r, p))
        prev = 0
        for k, j in enumerate(idx):
            dG, dC = _window_sums(path, prev, j)
            G = G + dG
            C = C + dC
            self.G[k] = G
            self.C[k] = C
            prev = j
        self._maps: dict[int, np.ndarray] = {}

    def min_eig(self, k: int) -> float:
        t = self.path.t[self.indices[k]]
        return float(np.linalg.eigvalsh(self.G[k] / t).min())

    def check(self, k: int) -> None:
        ev = np.linalg.eigvalsh(self.G[k])
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            t = self.path.t[self.indices[k]]
            raise SingularGramError(float(t), float(ev[0] / t))

    def estimator(self, k: int) -> np.ndarray:
        """Matrix ``E_k`` with ``θ̂(P, t_k) = E_k vecs(P)``."""
        E = self._maps.get(k)
        if E is None:
            self.check(k)
            E = np.linalg.solve(self.G[k], self.C[k])
            self._maps[k] = E
        return E


def estimate_theta(path: SdePath, P, t_k: float) -> np.ndarray:
    """``(∫_0^{t_k} ψψ^T dt)^{-1} ∫_0^{t_k} ψ d(x^T P x)`` from a sampled path.

    Raises
    ------
    SingularGramError
        If the Gram matrix is numerically singular at ``t_k``.
    """
    j = path.index_at(t_k)
    ints = PathIntegrals(path, [j])
    n = path.x.shape[1]
    return ints.estimator(0) @ vecs(as_matrix(P, n, n))


def empirical_gram_check(path: SdePath, t: float) -> float:
    """Smallest eigenvalue of ``(1/t) ∫_0^t ψψ^T dt``."""
    j = path.index_at(t)
    G, _ = _window_sums(path, 0, j)
    return float(np.linalg.eigvalsh(G / path.t[j]).min())


@dataclass
class ErgodicConfig:
    """Simulation and update settings.

    ``t_schedule`` maps ``k`` to the update time ``t_k``; the default is
    ``t0 * (k + 1)``.  The path is simulated once up to ``t_schedule(vi.max_iters)``.
    """

    vi: ViConfig
    dt: float = 1e-3
    t0: float = 5.0
    t_schedule: Callable[[int], float] | None = None

    def __post_init__(self):
        if self.dt <= 0 or self.t0 <= 0:
            raise ValueError("dt and t0 must be positive")
        if self.t_schedule is None:
            t0 = self.t0
            self.t_schedule = lambda k: t0 * (k + 1)

    def times(self, count: int) -> np.ndarray:
        ts = np.array([self.t_schedule(k) for k in range(count)], dtype=float)
        if ts[0] <= 0 or np.any(np.diff(ts) <= 0):
            raise ValueError("update times must be positive and strictly increasing")
        return ts


@dataclass
class ErgodicRun:
    run: ViRun
    path: SdePath
    gain: np.ndarray
    theta_final: np.ndarray
    update_times: np.ndarray = field(repr=False)


def ergodic_adp_run(
    sys: SdeSystem,
    pol: ExplorationPolicy,
    cost: CostWeights,
    cfg: ErgodicConfig,
    seed: int | None = None,
    path: SdePath | None = None,
) -> ErgodicRun:
    """Value iteration driven by the path-integral estimate of ``θ(P_k)``.

    Iteration ``k`` uses data up to ``t_k``.  A pre-simulated ``path`` may be
    supplied; otherwise one is simulated with ``seed``.
    """
    cost.check(sys.plant)
    if not cost.q_positive:
        raise ValueError("ergodic runs need Q positive definite")
    n, m = sys.n, sys.m
    max_iters = cfg.vi.max_iters
    ts = cfg.times(max_iters + 1)
    if path is None:
        path = simulate_sde(sys, pol, ts[-1], cfg.dt, seed)
    idx = np.array([path.index_at(t) for t in ts])
    if np.any(np.diff(idx) <= 0):
        raise ValueError("update times are closer than the simulation step")
    ints = PathIntegrals(path, idx)
    ints.check(0)

    p = sym_dim(n)
    iu = np.triu_indices(n)
    Q, R, Rinv = cost.Q, cost.R, cost.Rinv

    def drift(k, P):
        th = ints.estimator(k) @ P[iu]
        TA = np.zeros((n, n))
        TA[iu] = th[:p]
        TA = TA + np.triu(TA, 1).T
        PB = 0.5 * th[p : p + n * m].reshape(n, m)
        TB = Rinv @ PB.T
        D = TA - TB.T @ R @ TB + Q
        return (D + D.T) * 0.5

    run = iterate(drift, cfg.vi)
    k_last = min(run.iterations, max_iters)
    th = ints.estimator(k_last) @ vecs(run.final)
    gain = Rinv @ (0.5 * th[p : p + n * m].reshape(n, m)).T
    return ErgodicRun(run, path, gain, th, ts)


def write_path_csv(path: SdePath, out, stride: int = 1) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n, m = path.x.shape[1], path.u.shape[1]
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *(f"x{i + 1}" for i in range(n)), *(f"u{i + 1}" for i in range(m))])
        for j in range(0, len(path.t), stride):
            w.writerow([repr(float(path.t[j])), *(repr(float(v)) for v in path.x[j]), *(repr(float(v)) for v in path.u[j])])
    return out


def read_path_csv(src, n: int | None = None) -> SdePath:
    src = Path(src)
    with src.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    if n is None:
        n = sum(1 for h in header if h.startswith("x"))
    return SdePath(body[:, 0], body[:, 1 : 1 + n], body[:, 1 + n :])

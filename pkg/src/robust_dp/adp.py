"""Data-driven value iteration: trajectory regressors, recursive least squares and
the VI runners that work from learned or noisy models."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .matcore import as_matrix, bar_matrix, fro, sym_dim, symmetrize, unvecs, vecs
from .riccati import CostWeights, LtiSystem
from .vi import ViConfig, ViRun, iterate, riccati_drift

__all__ = [
    "TrajectoryExhausted",
    "Trajectory",
    "RegressorPair",
    "RlsState",
    "PeReport",
    "theta_dims",
    "theta_of",
    "theta_map",
    "build_regressors",
    "rls_init",
    "rls_step",
    "rls_batch",
    "check_pe",
    "extract_model_terms",
    "learned_drift",
    "AdpRun",
    "adp_vi_run",
    "noisy_model_drift",
    "noisy_model_vi",
    "read_trajectory_csv",
    "write_trajectory_csv",
    "write_regressors_csv",
]


class TrajectoryExhausted(RuntimeError):
    """The recorded data ran out before the value iteration terminated."""


def theta_dims(n: int, m: int) -> tuple[int, int, int]:
    """``(q, q_theta, p)``: full regressor length, length without the input-input
    block, and ``len(vecs(P))``."""
    q = sym_dim(n + m)
    return q, q - sym_dim(m), sym_dim(n)


def theta_of(P, A, B) -> np.ndarray:
    """``vecs([[P A + A^T P, P B], [B^T P, 0]])`` (length ``q``)."""
    A = as_matrix(A)
    B = as_matrix(B, rows=A.shape[0])
    n, m = B.shape
    P = as_matrix(P, n, n)
    AtP = A.T @ P
    blk = np.zeros((n + m, n + m))
    blk[:n, :n] = AtP + AtP.T
    blk[:n, n:] = P @ B
    blk[n:, :n] = blk[:n, n:].T
    return vecs(blk)


def theta_map(A, B) -> np.ndarray:
    """The exact ``q x p`` matrix ``M`` with ``theta_of(P) = M @ vecs(P)``."""
    A = as_matrix(A)
    B = as_matrix(B, rows=A.shape[0])
    n, m = B.shape
    p = sym_dim(n)
    cols = [theta_of(unvecs(e), A, B) for e in np.eye(p)]
    return np.column_stack(cols)


@dataclass(frozen=True)
class Trajectory:
    """Sampled input-state data: ``t`` (N,), ``x`` (N, n), ``u`` (N, m)."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if u.ndim == 1:
            u = u[:, None]
        if not (len(t) == len(x) == len(u)):
            raise ValueError("t, x and u must have the same number of samples")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("sample times must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class RegressorPair:
    phi: np.ndarray
    psi: np.ndarray


def build_regressors(traj: Trajectory, breakpoints: Sequence[int]) -> list[RegressorPair]:
    """Regressor pairs between consecutive breakpoints (sample indices).

    ``phi_j = xbar(t_{j+1}) - xbar(t_j)`` and ``psi_j`` is the trapezoidal
    integral of ``zbar`` over ``[t_j, t_{j+1}]``.
    """
    phis, psis = _regressor_arrays(traj, breakpoints)
    return [RegressorPair(f, s) for f, s in zip(phis, psis)]


def _regressor_arrays(traj: Trajectory, breakpoints) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(breakpoints, dtype=int)
    if idx.size < 2:
        raise ValueError("need at least two breakpoints")
    if idx.min() < 0 or idx.max() >= len(traj):
        raise ValueError("breakpoint outside the trajectory")
    if np.any(np.diff(idx) <= 0):
        raise ValueError("breakpoints must be strictly increasing")
    lo, hi = idx[0], idx[-1]
    z = np.hstack([traj.x[lo : hi + 1], traj.u[lo : hi + 1]])
    cum = cumulative_trapezoid(bar_matrix(z), traj.t[lo : hi + 1], axis=0, initial=0.0)
    rel = idx - lo
    psis = np.diff(cum[rel], axis=0)
    xbar = bar_matrix(traj.x[idx])
    phis = np.diff(xbar, axis=0)
    return phis, psis


@dataclass
class RlsState:
    """Recursive least-squares state; ``theta_k(P) = M @ vecs(P)``."""

    Sigma: np.ndarray
    M: np.ndarray
    lambda_init: float
    steps: int = 0


def rls_init(n: int, m: int, lambda_init: float = 1.0) -> RlsState:
    if lambda_init <= 0:
        raise ValueError("lambda_init must be positive")
    q, _, p = theta_dims(n, m)
    return RlsState(np.eye(q) / lambda_init, np.zeros((q, p)), lambda_init)


def rls_step(state: RlsState, pair: RegressorPair) -> RlsState:
    """One covariance update followed by the map update."""
    psi = np.asarray(pair.psi, dtype=float)
    phi = np.asarray(pair.phi, dtype=float)
    S = state.Sigma
    Spsi = S @ psi
    Sigma = S - np.outer(Spsi, Spsi) / (1.0 + psi @ Spsi)
    Sigma = (Sigma + Sigma.T) * 0.5
    gain = Sigma @ psi
    M = state.M + np.outer(gain, phi - psi @ state.M)
    return RlsState(Sigma, M, state.lambda_init, state.steps + 1)


def rls_batch(pairs: Sequence[RegressorPair], lambda_init: float = 1.0) -> np.ndarray:
    """Closed form ``(sum psi psi^T + lambda I)^{-1} sum psi phi^T``."""
    Psi = np.array([p.psi for p in pairs])
    Phi = np.array([p.phi for p in pairs])
    G = Psi.T @ Psi + lambda_init * np.eye(Psi.shape[1])
    return np.linalg.solve(G, Psi.T @ Phi)


@dataclass(frozen=True)
class PeReport:
    ok: bool
    min_eig: float
    alpha: float

    @property
    def margin(self) -> float:
        return self.min_eig - self.alpha


def check_pe(pairs: Sequence[RegressorPair], alpha: float) -> PeReport:
    """Persistent excitation: ``λ_min((1/l) Σ ψ_j ψ_j^T) > alpha``."""
    if len(pairs) < 1:
        raise ValueError("need at least one regressor pair")
    Psi = np.array([p.psi for p in pairs])
    lam = float(np.linalg.eigvalsh(Psi.T @ Psi / len(pairs)).min())
    return PeReport(lam > alpha, lam, alpha)


def extract_model_terms(theta, n: int, m: int, R) -> tuple[np.ndarray, np.ndarray]:
    """Recover ``(A^T P + P A, R^{-1} B^T P)`` from ``theta`` (length ``q`` or ``q_theta``)."""
    theta = np.asarray(theta, dtype=float).ravel()
    q, q_theta, _ = theta_dims(n, m)
    if theta.size == q_theta:
        theta = np.concatenate([theta, np.zeros(q - q_theta)])
    elif theta.size != q:
        raise ValueError(f"theta has length {theta.size}, expected {q_theta} or {q}")
    R = as_matrix(R, m, m)
    blk = unvecs(theta)
    return symmetrize(blk[:n, :n]), np.linalg.solve(R, blk[n:, :n])


def learned_drift(theta, n, m, cost: CostWeights) -> np.ndarray:
    """``T_A(theta) - T_B(theta)^T R T_B(theta) + Q``."""
    TA, TB = extract_model_terms(theta, n, m, cost.R)
    return TA - TB.T @ cost.R @ TB + cost.Q


@dataclass
class AdpRun:
    run: ViRun
    rls: RlsState
    gain: np.ndarray
    M_trace: list[tuple[int, np.ndarray]] = field(default_factory=list)


def adp_vi_run(
    traj: Trajectory,
    cost: CostWeights,
    config: ViConfig,
    *,
    breakpoints: Sequence[int] | None = None,
    lambda_init: float = 1.0,
    M_init: np.ndarray | None = None,
    learn: bool = True,
    on_exhausted: Literal["raise", "freeze"] = "raise",
    M_every: int = 0,
) -> AdpRun:
    """Value iteration driven by a recursively learned ``theta`` map.

    Iteration ``k`` first folds regressor pair ``k`` into the RLS state, then
    forms ``theta_k = M_k vecs(P_k)`` and takes the step
    ``P_k + h_k (T_A - T_B^T R T_B + Q)``.  Boundary, restart and termination
    follow :func:`robust_dp.vi.iterate`.

    Parameters
    ----------
    breakpoints : sample indices separating the regression windows; default
        is every sample.
    M_init : optional starting map (``q x p``); with ``learn=False`` it is used
        as a fixed model.
    on_exhausted : ``raise`` stops with :class:`TrajectoryExhausted` when the
        data runs out; ``freeze`` keeps the last estimate.
    M_every : if positive, snapshot ``M`` every ``M_every`` iterations.
    """
    n, m = traj.n, traj.m
    cost.check(LtiSystem(np.zeros((n, n)), np.zeros((n, m))))
    if config.P0.shape != (n, n):
        raise ValueError("P0 does not match the trajectory state dimension")
    state = rls_init(n, m, lambda_init)
    if M_init is not None:
        state.M = as_matrix(M_init, *state.M.shape).copy()
    if breakpoints is None:
        breakpoints = np.arange(len(traj))
    phis, psis = _regressor_arrays(traj, breakpoints) if learn else (None, None)
    n_pairs = 0 if phis is None else len(phis)

    q, _, p = theta_dims(n, m)
    iu = np.triu_indices(n)
    Q, R = cost.Q, cost.R
    # T_B = R^{-1} (B^T P block); precomputing R^{-1} keeps the loop cheap
    Rinv = cost.Rinv
    M_trace: list[tuple[int, np.ndarray]] = []
    st = {"state": state}

    def drift(k, P):
        s = st["state"]
        if learn:
            if k < n_pairs:
                s = rls_step(s, RegressorPair(phis[k], psis[k]))
                st["state"] = s
            elif on_exhausted == "raise":
                raise TrajectoryExhausted(
                    f"trajectory supplies {n_pairs} regressor pairs; iteration {k} needs more"
                )
        if M_every and k % M_every == 0:
            M_trace.append((k, s.M.copy()))
        theta = s.M @ P[iu]
        blk = _unvecs_fast(theta, n + m)
        TA = blk[:n, :n]
        TB = Rinv @ blk[n:, :n]
        D = TA - TB.T @ R @ TB + Q
        return (D + D.T) * 0.5

    run = iterate(drift, config)
    s = st["state"]
    theta = s.M @ vecs(run.final)
    _, gain = extract_model_terms(theta, n, m, R)
    return AdpRun(run, s, gain, M_trace)


_TRIU_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _unvecs_fast(v, n):
    iu = _TRIU_CACHE.get(n)
    if iu is None:
        iu = _TRIU_CACHE.setdefault(n, np.triu_indices(n))
    out = np.zeros((n, n))
    out[iu] = v
    out.T[iu] = v
    return out


def noisy_model_drift(
    sys_true: LtiSystem,
    cost: CostWeights,
    noise_dirs: Sequence[np.ndarray],
    sigma: float,
    rng: np.random.Generator,
    mode: Literal["instantaneous", "time_averaged"] = "time_averaged",
    input_dirs: Sequence[np.ndarray] = (),
):
    """Riccati drift evaluated on a sampled model.

    Each call at step ``k`` draws ``A_k = A + sigma * sum_i Δ_i v_i`` and, when
    ``input_dirs`` is given, ``B_k = B + sigma * sum_i E_i w_i`` with iid standard
    normal ``v, w``.  ``instantaneous`` uses the draw itself; ``time_averaged``
    uses the running mean of the draws ``0, ..., k``.  The drift must be called
    once per step with consecutive ``k``.  ``drift.estimate()`` returns the
    model ``(A, B)`` used by the latest call.
    """
    if mode not in ("instantaneous", "time_averaged"):
        raise ValueError(f"unknown mode {mode!r}")
    cost.check(sys_true)
    n, m = sys_true.n, sys_true.m
    dirs = np.array([as_matrix(D, n, n) for D in noise_dirs]) if len(noise_dirs) else np.zeros((0, n, n))
    bdirs = np.array([as_matrix(E, n, m) for E in input_dirs]) if len(input_dirs) else np.zeros((0, n, m))
    if sigma == 0.0 or (len(dirs) == 0 and len(bdirs) == 0):
        exact = riccati_drift(sys_true, cost)
        exact.estimate = lambda: (sys_true.A, sys_true.B)
        return exact
    A, B = sys_true.A, sys_true.B
    Rinv = cost.Rinv
    Q = cost.Q
    acc = {"A": np.zeros((n, n)), "B": np.zeros((n, m))}

    def drift(k, P):
        Ak = A + sigma * np.tensordot(rng.standard_normal(len(dirs)), dirs, axes=1) if len(dirs) else A
        Bk = B + sigma * np.tensordot(rng.standard_normal(len(bdirs)), bdirs, axes=1) if len(bdirs) else B
        if mode == "time_averaged":
            acc["A"] = acc["A"] + Ak
            acc["B"] = acc["B"] + Bk
            Ak = acc["A"] / (k + 1)
            Bk = acc["B"] / (k + 1)
        acc["last"] = (Ak, Bk)
        AtP = Ak.T @ P
        PB = P @ Bk
        return AtP + AtP.T - PB @ Rinv @ PB.T + Q

    drift.estimate = lambda: acc.get("last", (A, B))
    return drift


def noisy_model_vi(
    sys_true: LtiSystem,
    cost: CostWeights,
    noise_dirs: Sequence[np.ndarray],
    sigma: float,
    config: ViConfig,
    mode: Literal["instantaneous", "time_averaged"] = "time_averaged",
) -> ViRun:
    """Value iteration with a sampled estimate of ``A``.

    Each step draws ``A_k = A + sigma * sum_i Δ_i v_i(k)`` with ``v_i(k)`` iid
    standard normal from the stream seeded by ``config.seed``.  The
    ``instantaneous`` mode steps with ``A_k`` itself; ``time_averaged`` steps
    with the running mean of ``A_0, ..., A_k``.  With ``sigma = 0`` the run is
    identical to the model-based one.
    """
    rng = np.random.default_rng(config.seed)
    return iterate(noisy_model_drift(sys_true, cost, noise_dirs, sigma, rng, mode), config)


def write_trajectory_csv(traj: Trajectory, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["t", *(f"x{i + 1}" for i in range(traj.n)), *(f"u{i + 1}" for i in range(traj.m))]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, x, u in zip(traj.t, traj.x, traj.u):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in x), *(repr(float(v)) for v in u)])
    return path


def read_trajectory_csv(path, n: int | None = None) -> Trajectory:
    """Read ``t, x1..xn, u1..um`` rows; ``n`` is inferred from the header when omitted."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    if n is None:
        n = sum(1 for h in header if h.startswith("x"))
    return Trajectory(body[:, 0], body[:, 1 : 1 + n], body[:, 1 + n :])


def write_regressors_csv(pairs: Sequence[RegressorPair], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p, q = len(pairs[0].phi), len(pairs[0].psi)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", *(f"phi{i + 1}" for i in range(p)), *(f"psi{i + 1}" for i in range(q))])
        for j, pr in enumerate(pairs):
            w.writerow([j, *(repr(float(v)) for v in pr.phi), *(repr(float(v)) for v in pr.psi)])
    return path

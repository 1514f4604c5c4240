"""Riccati operator, differential Riccati flow and the Newton-Kleinman oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .matcore import (
    as_matrix,
    fro,
    is_hurwitz,
    is_pd,
    solve_lyapunov,
    symmetrize,
)

__all__ = [
    "LtiSystem",
    "CostWeights",
    "AreSolution",
    "ConvergenceError",
    "StabilizationError",
    "DmreBlowUp",
    "DmreTrajectory",
    "riccati_residual",
    "closed_loop_gain",
    "solve_are_kleinman",
    "integrate_dmre",
    "scale_cost",
    "l2_gain_ratio",
]


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations."""


class StabilizationError(ValueError):
    """The initial gain handed to the Kleinman iteration does not stabilize the plant."""


class DmreBlowUp(FloatingPointError):
    """The Riccati flow left the finite range."""

    def __init__(self, last_time: float):
        super().__init__(f"Riccati flow became non-finite after t = {last_time:.6g}")
        self.last_time = last_time


@dataclass(frozen=True)
class LtiSystem:
    """Plant ``dx/dt = A x + B u``."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        B = as_matrix(B, rows=A.shape[0])
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class CostWeights:
    """Quadratic weights: ``Q`` positive semidefinite, ``R`` positive definite."""

    Q: np.ndarray
    R: np.ndarray
    Rinv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        Q = symmetrize(as_matrix(self.Q))
        R = symmetrize(as_matrix(self.R))
        if not is_pd(R):
            raise ValueError("R must be symmetric positive definite")
        if np.linalg.eigvalsh(Q).min() < -1e-12 * max(1.0, fro(Q)):
            raise ValueError("Q must be symmetric positive semidefinite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Rinv", symmetrize(np.linalg.inv(R)))

    @property
    def q_positive(self) -> bool:
        return is_pd(self.Q)

    def check(self, sys: LtiSystem) -> None:
        if self.Q.shape != (sys.n, sys.n) or self.R.shape != (sys.m, sys.m):
            raise ValueError(
                f"cost shapes Q{self.Q.shape}, R{self.R.shape} do not match n={sys.n}, m={sys.m}"
            )


@dataclass(frozen=True)
class AreSolution:
    P_star: np.ndarray
    K_star: np.ndarray
    residual_norm: float
    iterations: int = 0


def _gain_matrix(sys: LtiSystem, cost: CostWeights) -> np.ndarray:
    # B R^{-1} B^T
    return symmetrize(sys.B @ cost.Rinv @ sys.B.T)


def riccati_residual(P, sys: LtiSystem, cost: CostWeights) -> np.ndarray:
    """``A^T P + P A - P B R^{-1} B^T P + Q`` (exactly symmetric)."""
    cost.check(sys)
    P = as_matrix(P, sys.n, sys.n)
    AtP = sys.A.T @ P
    PB = P @ sys.B
    return symmetrize(AtP + AtP.T - PB @ cost.Rinv @ PB.T + cost.Q)


def closed_loop_gain(P, sys: LtiSystem, cost: CostWeights) -> np.ndarray:
    """``R^{-1} B^T P``."""
    P = as_matrix(P, sys.n, sys.n)
    return cost.Rinv @ sys.B.T @ P


def solve_are_kleinman(
    sys: LtiSystem,
    cost: CostWeights,
    K0=None,
    *,
    tol: float = 1e-11,
    max_iter: int = 200,
) -> AreSolution:
    """Newton-Kleinman policy iteration for the algebraic Riccati equation.

    Starting from a stabilizing gain ``K0`` (zero when ``A`` is Hurwitz), each
    step solves the Lyapunov equation of the closed loop ``A - B K_i`` with
    weight ``Q + K_i^T R K_i`` and updates ``K_{i+1} = R^{-1} B^T P_i``.
    Iteration stops once ``||P_{i+1} - P_i||_F <= tol * max(1, ||P_i||_F)``.

    Raises
    ------
    StabilizationError
        ``A - B K0`` is not Hurwitz.
    ConvergenceError
        No convergence within ``max_iter`` iterations.
    """
    cost.check(sys)
    K = np.zeros((sys.m, sys.n)) if K0 is None else as_matrix(K0, sys.m, sys.n)
    if not is_hurwitz(sys.A - sys.B @ K):
        raise StabilizationError("A - B K0 is not Hurwitz; supply a stabilizing K0")

    P_prev = None
    for it in range(1, max_iter + 1):
        Acl = sys.A - sys.B @ K
        P = solve_lyapunov(Acl, cost.Q + K.T @ cost.R @ K)
        K = closed_loop_gain(P, sys, cost)
        if P_prev is not None and fro(P - P_prev) <= tol * max(1.0, fro(P_prev)):
            res = fro(riccati_residual(P, sys, cost))
            return AreSolution(P, K, res, it)
        P_prev = P
    raise ConvergenceError(f"Kleinman iteration did not converge in {max_iter} iterations")


@dataclass(frozen=True)
class DmreTrajectory:
    """Samples of the Riccati flow: ``t`` has shape (N,), ``P`` shape (N, n, n)."""

    t: np.ndarray
    P: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.P[-1]


def integrate_dmre(
    sys: LtiSystem,
    cost: CostWeights,
    P0,
    T: float,
    dt: float = 1e-3,
    disturbance: Callable[[float], np.ndarray] | None = None,
    stride: int = 1,
) -> DmreTrajectory:
    """Integrate ``dP/dt = A^T P + P A - P B R^{-1} B^T P + Q + Δ(t)`` with RK4.

    Parameters
    ----------
    P0 : symmetric initial value.
    T, dt : horizon and fixed step; ``round(T / dt)`` steps are taken.
    disturbance : optional map ``t -> Δ(t)``; values are symmetrized.
    stride : keep every ``stride``-th step (the initial and final samples are
        always kept).
    """
    if dt <= 0 or T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    cost.check(sys)
    P = symmetrize(as_matrix(P0, sys.n, sys.n))
    A, Q = sys.A, cost.Q
    S = _gain_matrix(sys, cost)

    def rhs(t, X):
        AtX = A.T @ X
        out = AtX + AtX.T - X @ S @ X + Q
        if disturbance is not None:
            out = out + symmetrize(disturbance(t))
        return out

    steps = int(round(T / dt))
    ts = [0.0]
    Ps = [P.copy()]
    t = 0.0
    for k in range(steps):
        # overflow is reported through DmreBlowUp below
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = rhs(t, P)
            k2 = rhs(t + 0.5 * dt, P + (0.5 * dt) * k1)
            k3 = rhs(t + 0.5 * dt, P + (0.5 * dt) * k2)
            k4 = rhs(t + dt, P + dt * k3)
            P_new = symmetrize(P + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        if not np.all(np.isfinite(P_new)):
            raise DmreBlowUp(t)
        P = P_new
        t = (k + 1) * dt
        if (k + 1) % stride == 0 or k + 1 == steps:
            ts.append(t)
            Ps.append(P.copy())
    return DmreTrajectory(np.array(ts), np.array(Ps))


def scale_cost(
    cost0: CostWeights,
    lam: float,
    mode: Literal["proportional", "gain_assignment"] = "proportional",
) -> CostWeights:
    """Scale the weights by ``λ``.

    ``proportional`` gives ``(λQ0, λR0)``, which leaves the optimal gain
    unchanged and scales the value matrix linearly.  ``gain_assignment`` gives
    ``(λQ0, λ²R0)``; shrinking ``λ`` then pushes the closed-loop poles left
    when ``B`` has full rank.
    """
    if lam <= 0:
        raise ValueError("λ must be positive")
    if mode == "proportional":
        return CostWeights(lam * cost0.Q, lam * cost0.R)
    if mode == "gain_assignment":
        return CostWeights(lam * cost0.Q, lam * lam * cost0.R)
    raise ValueError(f"unknown scaling mode {mode!r}")


def l2_gain_ratio(t, error, disturbance) -> float:
    """Empirical L2 gain ``sqrt(∫||P̃||² dt / ∫||Δ||² dt)`` from sampled signals.

    ``error`` and ``disturbance`` are arrays of matrices sampled on ``t``.
    """
    t = np.asarray(t, dtype=float)
    e2 = np.array([fro(E) ** 2 for E in error])
    d2 = np.array([fro(D) ** 2 for D in disturbance])
    den = np.trapezoid(d2, t)
    if den <= 0:
        raise ValueError("disturbance has zero energy")
    return math.sqrt(np.trapezoid(e2, t) / den)

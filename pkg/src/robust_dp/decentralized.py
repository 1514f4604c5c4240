"""Coupled Riccati equations and decentralized value iteration.

Each node owns its plant and weights and only ever sees the other nodes'
current value matrices.  The runner is written for any number of nodes; the
two-node case is the one covered by the convergence theory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_continuous_are
from scipy.optimize import linprog, root

from .matcore import as_matrix, fro, is_hurwitz, symmetrize, unvecs, vecs
from .riccati import ConvergenceError, CostWeights, LtiSystem, riccati_residual, solve_are_kleinman
from .vi import PowerStep, TraceRow, ViConfig, ViRun, riccati_drift

__all__ = [
    "Coupling",
    "CoupledProblem",
    "CoupledSolution",
    "DecentralizedResult",
    "GainBoundReport",
    "coupling_nzs",
    "coupling_unmatched",
    "NzsCoupling",
    "nzs_couplings",
    "default_node_config",
    "decentralized_vi_run",
    "coupled_residuals",
    "solve_coupled_oracle",
    "sample_ball",
    "gain_bound_report",
    "write_node_summary_csv",
]

# Δ_i(P_i, [P_j for j != i]) -> symmetric matrix
Coupling = Callable[[np.ndarray, Sequence[np.ndarray]], np.ndarray]


def coupling_nzs(P_i, P_j, B_j, R_j, R_ij) -> np.ndarray:
    """Coupling of player ``i`` to player ``j`` in a non-zero-sum LQ game.

    ``P_j B_j R_j^{-1} R_ij R_j^{-1} B_j^T P_j - P_j S_j P_i - P_i S_j P_j`` with
    ``S_j = B_j R_j^{-1} B_j^T``.
    """
    P_i = as_matrix(P_i)
    P_j = as_matrix(P_j)
    B_j = as_matrix(B_j, rows=P_j.shape[0])
    R_j = as_matrix(R_j)
    R_ij = as_matrix(R_ij)
    G = np.linalg.solve(R_j, B_j.T @ P_j)  # R_j^{-1} B_j^T P_j
    first = G.T @ R_ij @ G
    SjPj = B_j @ G
    cross = SjPj.T @ P_i
    return symmetrize(first - cross - cross.T)


def coupling_unmatched(P_2, P_1, B_1, R_1) -> np.ndarray:
    """``P_2 R_1^{-1} B_1^T P_1 B_1 + B_1^T P_1 B_1 R_1^{-1} P_2``, symmetrized.

    The product is only conformable when ``B_1^T P_1 B_1`` and ``R_1`` match
    the size of ``P_2`` (the scalar-input case used in practice).
    """
    P_2 = as_matrix(P_2)
    P_1 = as_matrix(P_1)
    B_1 = as_matrix(B_1, rows=P_1.shape[0])
    R_1 = as_matrix(R_1)
    W = B_1.T @ P_1 @ B_1
    if W.shape != R_1.shape or (R_1.shape[0] != P_2.shape[0] and R_1.shape != (1, 1)):
        raise ValueError("coupling_unmatched needs B_1^T P_1 B_1 and R_1 conformable with P_2")
    Rinv = np.linalg.inv(R_1)
    if R_1.shape == (1, 1):
        term = P_2 * float(Rinv[0, 0] * W[0, 0])
        return symmetrize(term + term.T)
    return symmetrize(P_2 @ Rinv @ W + W @ Rinv @ P_2)


@dataclass
class CoupledProblem:
    """Nodes ``(sys_i, cost_i)`` with couplings ``Δ_i(P_i, others)``.

    ``others`` lists the other nodes' matrices in node order with node ``i``
    removed.
    """

    nodes: list[tuple[LtiSystem, CostWeights]]
    couplings: list[Coupling]
    gain_polys: list | None = None

    def __post_init__(self):
        if len(self.nodes) != len(self.couplings):
            raise ValueError("need one coupling per node")
        if len(self.nodes) < 2:
            raise ValueError("a coupled problem needs at least two nodes")
        for sys, cost in self.nodes:
            cost.check(sys)

    @classmethod
    def pair(cls, sub1, sub2, delta1, delta2) -> "CoupledProblem":
        """Two-node problem with ``delta_i(P_i, P_j)``."""
        return cls([sub1, sub2], [lambda P, o: delta1(P, o[0]), lambda P, o: delta2(P, o[0])])

    @classmethod
    def uncoupled(cls, subs) -> "CoupledProblem":
        return cls(list(subs), [_zero_coupling for _ in subs])

    def others(self, Ps: Sequence[np.ndarray], i: int) -> list[np.ndarray]:
        return [P for j, P in enumerate(Ps) if j != i]

    def delta(self, i: int, Ps: Sequence[np.ndarray]) -> np.ndarray:
        return symmetrize(self.couplings[i](Ps[i], self.others(Ps, i)))


def _zero_coupling(P, others):
    return np.zeros_like(P)


class NzsCoupling:
    """Sum of game couplings of one player to the others.

    Besides evaluating ``Δ_i`` it exposes :meth:`split`, the affine structure
    ``Δ_i = C + M^T P_i + P_i M`` used by the oracle.
    """

    def __init__(self, B_others: Sequence, R_others: Sequence, R_cross: Sequence):
        if not (len(B_others) == len(R_others) == len(R_cross)):
            raise ValueError("need matching B, R and R_cross lists")
        self._B = [B if B.ndim == 2 else B.reshape(-1, 1) for B in (np.asarray(B, dtype=float) for B in B_others)]
        # R_j^{-1} B_j^T, precomputed
        self._RinvBt = [np.linalg.solve(as_matrix(R), B.T) for R, B in zip(R_others, self._B)]
        self._Rc = [as_matrix(R) for R in R_cross]

    def __call__(self, P_i, others):
        M, C = self.split(others)
        cross = M.T @ P_i
        return symmetrize(C + cross + cross.T)

    def split(self, others) -> tuple[np.ndarray, np.ndarray]:
        n = others[0].shape[0]
        M = np.zeros((n, n))
        C = np.zeros((n, n))
        for P_j, B_j, RinvBt, R_ij in zip(others, self._B, self._RinvBt, self._Rc):
            G = RinvBt @ P_j
            C = C + G.T @ R_ij @ G
            M = M - B_j @ G
        return M, symmetrize(C)


def nzs_couplings(systems: Sequence[LtiSystem], R_self: Sequence, R_cross) -> list[NzsCoupling]:
    """Game couplings for any number of players sharing a state.

    ``R_self[j]`` is player ``j``'s own input weight and ``R_cross[i][j]`` the
    weight player ``i`` puts on player ``j``'s input.
    """
    N = len(systems)
    out = []
    for i in range(N):
        idx = [j for j in range(N) if j != i]
        out.append(NzsCoupling([systems[j].B for j in idx], [R_self[j] for j in idx], [R_cross[i][j] for j in idx]))
    return out


@dataclass(frozen=True)
class CoupledSolution:
    P_star: list[np.ndarray]
    residual_norms: list[float]
    iterations: int = 0

    @property
    def P1_star(self):
        return self.P_star[0]

    @property
    def P2_star(self):
        return self.P_star[1]


def coupled_residuals(prob: CoupledProblem, Ps: Sequence[np.ndarray]) -> list[float]:
    return [
        fro(riccati_residual(Ps[i], sys, cost) + prob.delta(i, Ps))
        for i, (sys, cost) in enumerate(prob.nodes)
    ]


def default_node_config(P0, **kw) -> ViConfig:
    """Node settings: ``h_k = 0.05 / (1 + k)^0.6``."""
    kw.setdefault("step", PowerStep(0.05, 0.6))
    return ViConfig(P0, **kw)


class _Node:
    # holds the private model; the runner only exchanges value matrices
    __slots__ = ("_drift", "_coupling", "_config", "_step", "P", "trace", "status", "k_end", "ball")

    def __init__(self, drift, coupling, config: ViConfig, step_scale: float, ball: float | None):
        self._drift = drift
        self._coupling = coupling
        self._config = config
        base = config.step
        self._step = base if step_scale == 1.0 else (lambda k, f=base, s=step_scale: s * f(k))
        self.P = config.P0.copy()
        self.trace: list[TraceRow] = []
        self.status = None
        self.k_end = 0
        self.ball = ball if ball is not None else 100.0 * (1.0 + fro(config.P0))

    @property
    def active(self) -> bool:
        return self.status is None

    def propose(self, k: int, others: Sequence[np.ndarray]):
        cfg = self._config
        P = self.P
        h = self._step(k)
        D = self._drift(k, P)
        total = D + symmetrize(self._coupling(P, others))
        new = P + h * total
        new = (new + new.T) * 0.5
        if k % cfg.trace_every == 0:
            self.trace.append(TraceRow(k, 0, h, P, fro(total)))
        nrm = fro(new)
        if not math.isfinite(nrm) or nrm > self.ball:
            return "diverged", None
        if fro(new - P) / h < cfg.eps_bar:
            return "converged", None
        return None, new

    def finish(self, status, k, others):
        self.status = status
        self.k_end = k
        if not self.trace or self.trace[-1].k != k:
            if status == "converged":
                total = self._drift(k, self.P) + symmetrize(self._coupling(self.P, others))
                res = fro(total)
            else:
                res = math.nan
            self.trace.append(TraceRow(k, 0, self._step(k), self.P, res))

    def run(self) -> ViRun:
        return ViRun(self.trace, 0, self.status, self.P, self.k_end)


@dataclass
class DecentralizedResult:
    runs: list[ViRun]
    step_halved: bool

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.runs)

    @property
    def finals(self) -> list[np.ndarray]:
        return [r.final for r in self.runs]

    def __iter__(self):
        return iter(self.runs)

    def __getitem__(self, i):
        return self.runs[i]


def _run_once(prob, configs, scale, ball, drifts) -> list[_Node]:
    nodes = [
        _Node(
            riccati_drift(sys, cost) if drifts is None else drifts[i](),
            prob.couplings[i],
            configs[i],
            scale,
            ball,
        )
        for i, (sys, cost) in enumerate(prob.nodes)
    ]
    k = 0
    horizon = max(c.max_iters for c in configs)
    while any(nd.active for nd in nodes) and k < horizon:
        values = [nd.P for nd in nodes]
        updates = []
        for i, nd in enumerate(nodes):
            if not nd.active:
                updates.append((None, None))
                continue
            if k >= configs[i].max_iters:
                updates.append(("max_iters", None))
                continue
            updates.append(nd.propose(k, prob.others(values, i)))
        # synchronous commit: every node used the iteration-k values
        for i, (nd, (status, new)) in enumerate(zip(nodes, updates)):
            if not nd.active:
                continue
            if status is None:
                nd.P = new
            else:
                nd.finish(status, k, prob.others(values, i))
        k += 1
    final_values = [nd.P for nd in nodes]
    for i, nd in enumerate(nodes):
        if nd.active:
            nd.finish("max_iters", k, prob.others(final_values, i))
    return nodes


def decentralized_vi_run(
    prob: CoupledProblem,
    configs: Sequence[ViConfig] | None = None,
    *,
    ball: float | None = None,
    retry_halved: bool = True,
    drifts: Sequence[Callable[[], Callable]] | None = None,
) -> DecentralizedResult:
    """Synchronous decentralized value iteration.

    Node ``i`` steps ``P_i <- P_i + h_{i,k} (R_i(P_i) + Δ_i(P_i, P_others))`` and
    stops, returning ``P_{i,k}``, once ``||P_{i,k+1} - P_{i,k}|| / h_{i,k} < eps_bar``.
    A converged node keeps publishing its final value.  A node whose next
    iterate leaves the safety ball (default ``100 (1 + ||P_{i,0}||)``) or
    becomes non-finite is marked ``diverged``; the whole run is then repeated
    once with all step sizes halved.

    ``drifts`` optionally replaces each node's model-based Riccati drift by a
    factory returning a fresh ``drift(k, P)`` (for example one built on an
    online model estimate); factories are called again for the rerun.
    """
    if configs is None:
        configs = [default_node_config(np.zeros((sys.n, sys.n))) for sys, _ in prob.nodes]
    if len(configs) != len(prob.nodes):
        raise ValueError("need one config per node")
    for (sys, _), cfg in zip(prob.nodes, configs):
        if cfg.P0.shape != (sys.n, sys.n):
            raise ValueError("P0 shape does not match its node")
    if drifts is not None and len(drifts) != len(prob.nodes):
        raise ValueError("need one drift factory per node")
    nodes = _run_once(prob, configs, 1.0, ball, drifts)
    halved = False
    if retry_halved and any(nd.status == "diverged" for nd in nodes):
        nodes = _run_once(prob, configs, 0.5, ball, drifts)
        halved = True
    return DecentralizedResult([nd.run() for nd in nodes], halved)


def solve_coupled_oracle(
    prob: CoupledProblem,
    tol: float = 1e-10,
    *,
    K0s: Sequence | None = None,
    max_sweeps: int = 500,
    polish: bool = True,
) -> CoupledSolution:
    """Fixed point of the coupled AREs by alternating Kleinman solves.

    Sweep ``s`` solves node ``i``'s ARE with the other nodes' newest values
    frozen (Gauss-Seidel order).  Couplings exposing ``split`` (affine in
    ``P_i``) enter exactly through a shifted drift ``A_i + M`` and weight
    ``Q_i + C``; any other coupling is frozen at the previous sweep and added
    to ``Q_i``.  Each Kleinman solve is warm-started from the previous gain.  A final Newton polish on the
    stacked residual is applied when ``polish`` is set.

    Raises
    ------
    ConvergenceError
        If the sweeps stop contracting or an effective weight loses
        semidefiniteness.
    """
    N = len(prob.nodes)
    Ps = [np.zeros((sys.n, sys.n)) for sys, _ in prob.nodes]
    Ks = [_initial_gain(sys) for sys, _ in prob.nodes] if K0s is None else [np.asarray(K, dtype=float) for K in K0s]
    prev_change = math.inf
    stalls = 0
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for i, (sys, cost) in enumerate(prob.nodes):
            coupling = prob.couplings[i]
            try:
                if hasattr(coupling, "split"):
                    M, C = coupling.split(prob.others(Ps, i))
                    node_sys = LtiSystem(sys.A + M, sys.B)
                    Qeff = cost.Q + C
                    K0 = Ks[i] if Ks[i] is not None and is_hurwitz(node_sys.A - node_sys.B @ Ks[i]) else _initial_gain(node_sys)
                else:
                    node_sys = sys
                    Qeff = symmetrize(cost.Q + prob.delta(i, Ps))
                    K0 = Ks[i]
                sol = solve_are_kleinman(node_sys, _loose_cost(Qeff, cost.R), K0=K0)
            except (ValueError, np.linalg.LinAlgError, ConvergenceError) as exc:
                raise ConvergenceError(f"coupled oracle failed at sweep {sweep}, node {i}: {exc}") from exc
            change = max(change, fro(sol.P_star - Ps[i]) / max(1.0, fro(sol.P_star)))
            Ps[i] = sol.P_star
            Ks[i] = sol.K_star
        if change < tol:
            break
        if change >= prev_change:
            stalls += 1
            if stalls > 20:
                raise ConvergenceError("coupled oracle sweeps are not contracting")
        prev_change = change
    else:
        raise ConvergenceError(f"coupled oracle did not converge in {max_sweeps} sweeps")

    if polish:
        Ps = _newton_polish(prob, Ps)
    res = coupled_residuals(prob, Ps)
    scale = max(1.0, max(fro(P) for P in Ps))
    if max(res) > max(tol, 1e-9) * scale:
        raise ConvergenceError(f"coupled oracle residuals {res} exceed tolerance")
    return CoupledSolution(Ps, res, sweep)


def _initial_gain(sys: LtiSystem):
    # any stabilizing gain will do; a unit-weight LQR gain is a convenient one
    if is_hurwitz(sys.A):
        return None
    X = solve_continuous_are(sys.A, sys.B, np.eye(sys.n), np.eye(sys.m))
    return sys.B.T @ X


def _loose_cost(Q, R) -> CostWeights:
    # effective weights may be slightly indefinite in early sweeps; PSD is checked by
    # the Kleinman solve failing instead
    obj = object.__new__(CostWeights)
    Q = symmetrize(Q)
    R = symmetrize(as_matrix(R))
    object.__setattr__(obj, "Q", Q)
    object.__setattr__(obj, "R", R)
    object.__setattr__(obj, "Rinv", symmetrize(np.linalg.inv(R)))
    return obj


def _newton_polish(prob: CoupledProblem, Ps: list[np.ndarray]) -> list[np.ndarray]:
    sizes = [P.shape[0] for P in Ps]

    def unpack(z):
        out, pos = [], 0
        for n in sizes:
            d = n * (n + 1) // 2
            out.append(unvecs(z[pos : pos + d]))
            pos += d
        return out

    def F(z):
        Xs = unpack(z)
        return np.concatenate(
            [vecs(riccati_residual(Xs[i], sys, cost) + prob.delta(i, Xs)) for i, (sys, cost) in enumerate(prob.nodes)]
        )

    z0 = np.concatenate([vecs(P) for P in Ps])
    sol = root(F, z0, method="hybr", options={"xtol": 1e-14})
    if sol.success and np.linalg.norm(F(sol.x)) <= np.linalg.norm(F(z0)):
        return unpack(sol.x)
    return Ps


def sample_ball(centers: Sequence[np.ndarray], radius: float, count: int, seed: int = 0) -> list[list[np.ndarray]]:
    """Random symmetric perturbations of ``centers`` with Frobenius norm at most ``radius``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        tup = []
        for C in centers:
            E = symmetrize(rng.standard_normal(C.shape))
            E *= radius * rng.uniform() / max(fro(E), 1e-300)
            tup.append(C + E)
        out.append(tup)
    return out


@dataclass(frozen=True)
class GainBoundReport:
    """``coeffs[i][j]`` holds ``(c1, c2, c3)`` of ``γ_ij(s) = c1 s + c2 s² + c3 s³``."""

    coeffs: np.ndarray
    max_slack: np.ndarray = field(repr=False)

    def gamma(self, i: int, j: int, s: float) -> float:
        c = self.coeffs[i, j]
        return float(c[0] * s + c[1] * s**2 + c[2] * s**3)


def gain_bound_report(
    prob: CoupledProblem, samples: Sequence[Sequence[np.ndarray]], P_star: Sequence[np.ndarray]
) -> GainBoundReport:
    """Fit nonnegative cubic bounds ``|Δ̃_i| <= Σ_j γ_ij(|P̃_j|)`` on sampled points.

    For each node the coefficients minimize the summed bound over the samples
    subject to the bound holding at every sample (a linear program).  The fit
    is a diagnostic; it certifies nothing beyond the samples.
    """
    N = len(prob.nodes)
    base = [prob.delta(i, P_star) for i in range(N)]
    coeffs = np.zeros((N, N, 3))
    slack = np.zeros(N)
    for i in range(N):
        rows, rhs = [], []
        for Ps in samples:
            d = fro(prob.delta(i, Ps) - base[i])
            s = [fro(Ps[j] - P_star[j]) for j in range(N)]
            rows.append(np.concatenate([[sj, sj**2, sj**3] for sj in s]))
            rhs.append(d)
        X = np.array(rows)
        y = np.array(rhs)
        if not np.any(y > 0):
            continue
        res = linprog(X.sum(axis=0), A_ub=-X, b_ub=-y, bounds=(0, None), method="highs")
        if not res.success:
            raise RuntimeError(f"gain bound fit failed for node {i}: {res.message}")
        coeffs[i] = res.x.reshape(N, 3)
        slack[i] = float(np.max(X @ res.x - y))
    return GainBoundReport(coeffs, slack)


def write_node_summary_csv(result: DecentralizedResult, residuals: Sequence[float], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "iterations", "status", "residual"])
        for i, (run, res) in enumerate(zip(result.runs, residuals)):
            w.writerow([i + 1, run.iterations, run.terminated, repr(float(res))])
    return path

"""Dense symmetric-matrix helpers and the vectorization maps used across the package.

Matrices are plain ``numpy`` arrays.  Anything that is meant to live in the
space of symmetric matrices goes through :func:`symmetrize`, which makes the
result exactly symmetric in floating point.  All tolerances in this package are
expressed in the Frobenius norm.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg.lapack import dpotrf

__all__ = [
    "LyapunovError",
    "symmetrize",
    "as_matrix",
    "vecs",
    "unvecs",
    "ves",
    "unves",
    "kron_sum",
    "sym_isometry",
    "bar_vec",
    "bar_matrix",
    "solve_lyapunov",
    "is_pd",
    "is_hurwitz",
    "fro",
    "sym_dim",
]


class LyapunovError(np.linalg.LinAlgError):
    """Raised when ``A^T X + X A + W = 0`` has no unique solution."""


def symmetrize(M) -> np.ndarray:
    """Return ``(M + M^T) / 2``; exactly symmetric since float addition commutes."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return (M + M.T) * 0.5


def as_matrix(M, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float array, optionally checking the shape."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got {M.ndim} dimensions")
    if rows is not None and M.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {M.shape[0]}")
    if cols is not None and M.shape[1] != cols:
        raise ValueError(f"expected {cols} columns, got {M.shape[1]}")
    return M


def sym_dim(n: int) -> int:
    return n * (n + 1) // 2


def fro(M) -> float:
    """Frobenius norm (vector 2-norm for 1-D input)."""
    M = np.asarray(M)
    return math.sqrt(float(np.vdot(M, M)))


def _triu(n: int):
    # row-major upper triangle: (0,0), (0,1), ..., (0,n-1), (1,1), ...
    return np.triu_indices(n)


def vecs(M) -> np.ndarray:
    """Stack the upper triangle of a symmetric matrix row by row.

    >>> vecs([[2.0, 3.0], [3.0, 5.0]])
    array([2., 3., 5.])
    """
    M = np.asarray(M, dtype=float)
    return M[_triu(M.shape[0])].copy()


def unvecs(v) -> np.ndarray:
    """Inverse of :func:`vecs`."""
    v = np.asarray(v, dtype=float).ravel()
    n = int(round((math.sqrt(8 * v.size + 1) - 1) / 2))
    if sym_dim(n) != v.size:
        raise ValueError(f"length {v.size} is not a triangular number")
    M = np.zeros((n, n))
    iu = _triu(n)
    M[iu] = v
    M.T[iu] = v
    return M


def ves(M) -> np.ndarray:
    """Column-stacked vectorization."""
    return np.asarray(M, dtype=float).ravel(order="F").copy()


def unves(v, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape((rows, cols), order="F")


def kron_sum(A, C) -> np.ndarray:
    """Kronecker sum ``A ⊗ I + I ⊗ C`` of two square matrices of equal size."""
    A = as_matrix(A)
    C = as_matrix(C)
    if A.shape[0] != A.shape[1] or C.shape[0] != C.shape[1]:
        raise ValueError("kron_sum needs square matrices")
    if A.shape != C.shape:
        raise ValueError(f"dimension mismatch: {A.shape} vs {C.shape}")
    eye = np.eye(A.shape[0])
    return np.kron(A, eye) + np.kron(eye, C)


def sym_isometry(M) -> np.ndarray:
    """Like :func:`vecs` but with off-diagonal entries scaled by sqrt(2).

    The Euclidean inner product of two images equals the Frobenius inner
    product of the matrices.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    i, j = _triu(n)
    return np.where(i == j, 1.0, math.sqrt(2.0)) * M[i, j]


def bar_vec(xi) -> np.ndarray:
    """Quadratic monomials ``[x1^2, 2 x1 x2, ..., 2 x1 xq, x2^2, ..., xq^2]``.

    Satisfies ``bar_vec(x) @ vecs(P) == x @ P @ x`` for symmetric ``P``.
    """
    xi = np.asarray(xi, dtype=float).ravel()
    i, j = _triu(xi.size)
    return np.where(i == j, 1.0, 2.0) * xi[i] * xi[j]


def bar_matrix(X) -> np.ndarray:
    """Row-wise :func:`bar_vec` of a ``(N, q)`` sample matrix."""
    X = np.asarray(X, dtype=float)
    i, j = _triu(X.shape[1])
    return np.where(i == j, 1.0, 2.0) * X[:, i] * X[:, j]


def solve_lyapunov(A, W) -> np.ndarray:
    """Solve ``A^T X + X A + W = 0`` through the Kronecker-sum linear system.

    The system ``(A ⊕ A)^T vec(X) = -vec(W)`` is solved by LU with partial
    pivoting.  Intended for small dense problems (n up to about 10).

    Raises
    ------
    LyapunovError
        If ``A`` has eigenvalues with ``λ_i + λ_j = 0`` (singular system).
    """
    A = as_matrix(A)
    n = A.shape[0]
    W = as_matrix(W, n, n)
    L = kron_sum(A, A).T
    # a singular Kronecker sum shows up either as a LAPACK failure or as
    # a pivot at roundoff level, so check the conditioning explicitly
    try:
        lu_ok = np.linalg.cond(L) < 1e14
    except np.linalg.LinAlgError:
        lu_ok = False
    if not lu_ok or not np.all(np.isfinite(L)):
        raise LyapunovError("Lyapunov operator is singular (eigenvalue pairs sum to zero)")
    try:
        x = np.linalg.solve(L, -ves(W))
    except np.linalg.LinAlgError as exc:
        raise LyapunovError(str(exc)) from exc
    return symmetrize(unves(x, n, n))


def is_pd(M) -> bool:
    """Numerical positive definiteness through a Cholesky factorization.

    A matrix passes when the factorization succeeds and every pivot
    ``L_ii^2`` exceeds ``1e-10 * max(1, ||M||_F)``.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        return False
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    L, info = dpotrf(M, lower=1, clean=0)
    if info != 0:
        return False
    tol = 1e-10 * max(1.0, fro(M))
    return bool(np.min(np.diag(L)) ** 2 > tol)


def is_hurwitz(A) -> bool:
    """Stability test: solve ``A^T X + X A + I = 0`` and check ``X > 0``."""
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("is_hurwitz needs a square matrix")
    try:
        X = solve_lyapunov(A, np.eye(A.shape[0]))
    except LyapunovError:
        return False
    return is_pd(X)

"""Robust value iteration and data-driven LQ control.

Submodules
----------
matcore        symmetric-matrix helpers and vectorization maps
riccati        Riccati operator, DMRE integration and the Kleinman oracle
vi             baseline and robust value iteration
adp            regressors, recursive least squares and data-driven VI
ergodic        SDE simulation and the ergodic ADP runner
decentralized  coupled Riccati equations and decentralized VI
"""

from .matcore import bar_vec, is_hurwitz, is_pd, solve_lyapunov, symmetrize, vecs, ves
from .riccati import (
    AreSolution,
    CostWeights,
    LtiSystem,
    closed_loop_gain,
    integrate_dmre,
    riccati_residual,
    scale_cost,
    solve_are_kleinman,
)

__version__ = "0.1.0"

__all__ = [
    "AreSolution",
    "CostWeights",
    "LtiSystem",
    "bar_vec",
    "closed_loop_gain",
    "integrate_dmre",
    "is_hurwitz",
    "is_pd",
    "riccati_residual",
    "scale_cost",
    "solve_are_kleinman",
    "solve_lyapunov",
    "symmetrize",
    "vecs",
    "ves",
]

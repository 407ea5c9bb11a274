"""
Small dense convex-QP solver and exact projections.

The solver is an operator-splitting (ADMM) iteration specialized to
strongly convex quadratics over polytopes of modest size: it alternates a
cached Cholesky solve with a clip onto the stacked constraint interval,
plus a scaled dual update.  ``project_box_budget`` solves the
box-intersect-budget projection exactly by bisecting on the scalar
multiplier of the budget constraint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

#: Tikhonov jitter added to every quadratic term: keeps the minimizer unique
#: for semidefinite costs without measurably moving it.
JITTER = 1e-10

_RELAX = 1.6  # over-relaxation factor, standard range (0, 2)


class InfeasibleError(ValueError):
    """Raised when a projection or solve target set is provably empty."""


@dataclass(frozen=True)
class QpSettings:
    """Residual tolerances and iteration/penalty parameters."""

    tol_primal: float = 1e-8
    tol_dual: float = 1e-8
    max_iter: int = 20000
    rho_penalty: float = 1.0

    def __post_init__(self):
        if min(self.tol_primal, self.tol_dual, self.rho_penalty) <= 0:
            raise ValueError("tolerances and rho_penalty must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class QpProblem:
    """minimize 0.5 u'Pu + q'u  s.t.  Au = b,  lo <= u <= hi,  Hu <= h.

    P is symmetrized on construction and must be positive semidefinite;
    any constraint block may be omitted.
    """

    quad_matrix: np.ndarray
    lin_vector: np.ndarray
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    ineq_matrix: np.ndarray | None = None
    ineq_rhs: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.quad_matrix, dtype=float)
        object.__setattr__(self, "quad_matrix", 0.5 * (p + p.T))
        object.__setattr__(self, "lin_vector",
                           np.asarray(self.lin_vector, dtype=float))
        n = self.dim
        if self.quad_matrix.shape != (n, n):
            raise ValueError("quad_matrix shape does not match lin_vector")

    @property
    def dim(self) -> int:
        return self.lin_vector.shape[0]

    def objective(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ (self.quad_matrix @ u) + self.lin_vector @ u)


class QpResult(NamedTuple):
    u: np.ndarray
    status: str  # converged | max_iter | infeasible
    iterations: int
    primal_residual: float
    dual_residual: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _constraint_stack(problem: QpProblem):
    """Stack all constraints as  l <= M u <= r."""
    n = problem.dim
    blocks, lows, highs = [], [], []
    lo = np.full(n, -np.inf) if problem.lo is None else np.asarray(problem.lo, float)
    hi = np.full(n, np.inf) if problem.hi is None else np.asarray(problem.hi, float)
    blocks.append(np.eye(n))
    lows.append(lo)
    highs.append(hi)
    if problem.eq_matrix is not None:
        a = np.atleast_2d(np.asarray(problem.eq_matrix, float))
        b = np.atleast_1d(np.asarray(problem.eq_rhs, float))
        blocks.append(a)
        lows.append(b)
        highs.append(b)
    if problem.ineq_matrix is not None and len(problem.ineq_matrix):
        h_mat = np.atleast_2d(np.asarray(problem.ineq_matrix, float))
        h_rhs = np.atleast_1d(np.asarray(problem.ineq_rhs, float))
        blocks.append(h_mat)
        lows.append(np.full(h_rhs.shape, -np.inf))
        highs.append(h_rhs)
    return np.vstack(blocks), np.concatenate(lows), np.concatenate(highs)


def solve_qp(problem: QpProblem, settings: QpSettings | None = None,
             x0: np.ndarray | None = None) -> QpResult:
    """Solve a box/equality/inequality constrained convex QP.

    Returns the iterate together with a status flag; ``max_iter`` returns
    the best iterate found, and apparent infeasibility (stalled primal
    residual with a growing multiplier) is flagged as ``infeasible``.
    """
    settings = settings or QpSettings()
    mat, low, high = _constraint_stack(problem)
    if np.any(low > high):
        raise InfeasibleError("constraint interval is empty")
    n = problem.dim
    rho = settings.rho_penalty
    reg = problem.quad_matrix + JITTER * np.eye(n) + rho * mat.T @ mat
    chol = cho_factor(reg)
    q = problem.lin_vector

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    v = np.clip(mat @ x, low, high)
    w = np.zeros(mat.shape[0])

    primal = dual = np.inf
    stall_check, stall_primal = 2000, np.inf
    for it in range(1, settings.max_iter + 1):
        x = cho_solve(chol, rho * mat.T @ (v - w) - q)
        mx = mat @ x
        mx_relax = _RELAX * mx + (1.0 - _RELAX) * v
        v_new = np.clip(mx_relax + w, low, high)
        w = w + mx_relax - v_new
        primal = float(np.max(np.abs(mx - v_new)))
        dual = float(rho * np.max(np.abs(mat.T @ (v_new - v))))
        v = v_new
        if primal <= settings.tol_primal and dual <= settings.tol_dual:
            return QpResult(x, "converged", it, primal, dual)
        if it % stall_check == 0:
            # no meaningful primal progress at a large residual: treat the
            # problem as infeasible rather than spinning to max_iter
            if primal > 1e3 * settings.tol_primal and primal > 0.99 * stall_primal:
                return QpResult(x, "infeasible", it, primal, dual)
            stall_primal = primal
    return QpResult(x, "max_iter", settings.max_iter, primal, dual)


def project_box_budget(v: np.ndarray, lo, hi, total: float,
                       tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection onto {u : lo <= u <= hi, sum(u) = total}.

    The KKT conditions give u = clip(v - tau, lo, hi) for a scalar tau;
    sum(clip(v - tau)) is continuous and nonincreasing in tau, so tau is
    found by bisection until |sum(u) - total| <= tol.

    Raises
    ------
    InfeasibleError
        If total lies outside [sum(lo), sum(hi)].
    """
    v = np.asarray(v, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), v.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), v.shape)
    if np.any(lo > hi):
        raise InfeasibleError("box is empty (lo > hi)")
    total_lo, total_hi = float(lo.sum()), float(hi.sum())
    if not (total_lo - tol <= total <= total_hi + tol):
        raise InfeasibleError(
            f"budget {total:g} outside achievable [{total_lo:g}, {total_hi:g}]")

    tau_lo = float(np.min(v - hi))   # everything clips to hi: sum >= total
    tau_hi = float(np.max(v - lo))   # everything clips to lo: sum <= total
    for tau in (tau_lo, tau_hi):
        u = np.clip(v - tau, lo, hi)
        if abs(u.sum() - total) <= tol:
            return u
    for _ in range(200):
        tau = 0.5 * (tau_lo + tau_hi)
        u = np.clip(v - tau, lo, hi)
        gap = u.sum() - total
        if abs(gap) <= tol:
            break
        if gap > 0:
            tau_lo = tau
        else:
            tau_hi = tau
    return u

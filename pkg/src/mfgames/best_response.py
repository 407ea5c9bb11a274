"""
Per-agent optimal responses to a frozen price signal.

Given a price vector y standing in for the aggregate term, an agent solves

    minimize  V(u) + y . (x or u)   over its box/budget/state polytope,

a strongly convex QP.  When the state box provably cannot bind and the
quadratic weight is a positive multiple of the identity, the solution is an
exact projection onto the box-budget set; otherwise the operator-splitting
QP engine is used.  Both paths are pure functions and safe to run for many
agents in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MODE_CONTROL, MODE_STATE, AgentSpec, TimeGrid, lift_dynamics
from .qp import QpProblem, QpResult, QpSettings, project_box_budget, solve_qp


class ResponseError(RuntimeError):
    """Inner QP failure, tagged with the offending agent id."""

    def __init__(self, agent_id: int, result: QpResult):
        self.agent_id = agent_id
        self.result = result
        super().__init__(f"agent {agent_id}: QP ended with status "
                         f"{result.status!r} (primal {result.primal_residual:.2e})")


@dataclass(frozen=True)
class BestResponseQuery:
    """An agent, the grid, the price vector and the coupling mode."""

    agent: AgentSpec
    grid: TimeGrid
    price_signal: np.ndarray
    mode: str = MODE_CONTROL

    def __post_init__(self):
        if self.mode not in (MODE_STATE, MODE_CONTROL):
            raise ValueError(f"unknown mode {self.mode!r}")
        y = np.asarray(self.price_signal, dtype=float)
        if y.shape != (self.grid.horizon_k,):
            raise ValueError(f"price signal must have shape "
                             f"({self.grid.horizon_k},), got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("price signal must be finite")
        object.__setattr__(self, "price_signal", y)


def state_box_redundant(agent: AgentSpec, grid: TimeGrid) -> bool:
    """True when no feasible control can leave the state box.

    Pure-integrator fast check: with a = b = 1 and nonnegative controls the
    state path is nondecreasing, so it stays within [x_min, x_max] whenever
    the minimum-rate path clears the floor and x0 + budget clears every cap.
    """
    if agent.a_coeff != 1.0 or agent.b_coeff != 1.0:
        return False
    lo, _ = agent.control_bounds(grid)
    if np.any(lo < 0):
        return False
    xlo, xhi = agent.state_bounds(grid)
    return bool(np.all(agent.x0 + np.cumsum(lo) >= xlo)
                and agent.x0 + agent.budget <= np.min(xhi))


def _solve_polytope_qp(agent: AgentSpec, grid: TimeGrid, quad_diag: float,
                       lin: np.ndarray, extra_quad: np.ndarray | None,
                       settings: QpSettings | None) -> np.ndarray:
    """min (quad_diag/2)||u||^2 + (u'Qu)/2 + lin.u over the agent polytope."""
    lo, hi = agent.control_bounds(grid)
    if extra_quad is None and quad_diag > 0 and state_box_redundant(agent, grid):
        return project_box_budget(-lin / quad_diag, lo, hi, agent.budget)

    k = grid.horizon_k
    quad = quad_diag * np.eye(k)
    if extra_quad is not None:
        quad = quad + extra_quad
    lift = lift_dynamics(agent, grid)
    xlo, xhi = agent.state_bounds(grid)
    rows = np.vstack([lift.matrix_c, -lift.matrix_c])
    rhs = np.concatenate([xhi - lift.offset_d, lift.offset_d - xlo])
    finite = np.isfinite(rhs)
    problem = QpProblem(quad_matrix=quad, lin_vector=lin,
                        eq_matrix=np.ones((1, k)), eq_rhs=[agent.budget],
                        lo=lo, hi=hi,
                        ineq_matrix=rows[finite], ineq_rhs=rhs[finite])
    result = solve_qp(problem, settings)
    if not result.converged:
        raise ResponseError(agent.id, result)
    return result.u


def best_response(query: BestResponseQuery,
                  settings: QpSettings | None = None) -> np.ndarray:
    """Optimal control against the frozen price signal.

    Control-coupled mode prices the control directly; state-coupled mode
    prices the lifted state path, pulling C'y into the linear term.
    """
    agent, grid = query.agent, query.grid
    lin = 2.0 * agent.price_slope * agent.offset_vector(grid)
    if query.mode == MODE_CONTROL:
        lin = lin + query.price_signal
    else:
        lift = lift_dynamics(agent, grid)
        lin = lin + lift.matrix_c.T @ query.price_signal
    return _solve_polytope_qp(agent, grid, 2.0 * agent.cost_quad_u, lin,
                              None, settings)


def best_response_value(query: BestResponseQuery,
                        settings: QpSettings | None = None) -> float:
    """Minimal frozen-price cost V(u) + y . (x or u); the aggregate-only
    cost G is a constant here and is excluded."""
    u = best_response(query, settings)
    agent, grid = query.agent, query.grid
    value = agent.individual_cost(u, grid)
    if query.mode == MODE_CONTROL:
        value += float(query.price_signal @ u)
    else:
        x = lift_dynamics(agent, grid).trajectory(u)
        value += float(query.price_signal @ x)
    return value


def prox_response(agent: AgentSpec, grid: TimeGrid, center: np.ndarray,
                  rho: float, mode: str = MODE_CONTROL,
                  settings: QpSettings | None = None) -> np.ndarray:
    """Proximal agent block used by consensus splitting:

        minimize  V(u) + (rho/2) * ||coupled(u) - center||^2

    where coupled(u) is u (control mode) or the lifted state path (state
    mode), over the agent polytope.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    center = np.asarray(center, dtype=float)
    lin = 2.0 * agent.price_slope * agent.offset_vector(grid)
    if mode == MODE_CONTROL:
        quad_diag = 2.0 * agent.cost_quad_u + rho
        lin = lin - rho * center
        return _solve_polytope_qp(agent, grid, quad_diag, lin, None, settings)
    lift = lift_dynamics(agent, grid)
    extra = rho * lift.matrix_c.T @ lift.matrix_c
    lin = lin + rho * lift.matrix_c.T @ (lift.offset_d - center)
    return _solve_polytope_qp(agent, grid, 2.0 * agent.cost_quad_u, lin,
                              extra, settings)

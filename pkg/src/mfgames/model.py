"""
Domain model for aggregative games with mean-field price coupling.

An instance couples N independently constrained linear agents through the
population average of their states (or controls).  Each agent pays an
individual cost plus a price term driven by the aggregate; the matching
social-welfare program replaces the price map F with its potential phi,
linked by F(z) = phi'(z) / N.

All types are immutable after construction and all operations are pure
functions, so instances can be shared freely across parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

# Aggregate the population state path or the control path.
MODE_STATE = "state-average"
MODE_CONTROL = "control-average"

#: Feasibility slack used when checking constraint satisfaction of data.
FEAS_TOL = 1e-6


def _as_readonly(a, dtype=float):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _per_period(value, horizon):
    """Broadcast a scalar-or-vector bound to a length-``horizon`` array."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(horizon, float(arr))
    if arr.shape != (horizon,):
        raise ValueError(f"expected scalar or shape ({horizon},), got {arr.shape}")
    return arr.copy()


@dataclass(frozen=True)
class TimeGrid:
    """Discrete control horizon: ``horizon_k`` periods of ``period_minutes`` each."""

    horizon_k: int
    period_minutes: float = 5.0

    def __post_init__(self):
        if self.horizon_k < 1:
            raise ValueError("horizon_k must be >= 1")
        if self.period_minutes <= 0:
            raise ValueError("period_minutes must be positive")


@dataclass(frozen=True)
class AgentSpec:
    """One agent's scalar linear dynamics, cost weights and constraint set.

    Dynamics are x(t) = a_coeff * x(t-1) + b_coeff * u(t) started at ``x0``.
    The feasible set is the box ``u_min <= u <= u_max`` intersected with the
    total-allocation equality ``sum(u) == budget`` and the per-period state
    box ``x_min <= x <= x_max``.  The individual cost is

        V(u) = cost_quad_u * ||u||^2 + 2 * price_slope * price_offset . u

    which, together with an aggregate price term, reproduces the
    charging-coordination cost  eta*||u - z||^2 + 2*gamma*(z + c)' u.
    Bounds and ``price_offset`` may be scalars (uniform in time) or
    per-period vectors.
    """

    id: int
    a_coeff: float = 1.0
    b_coeff: float = 1.0
    x0: float = 0.0
    x_min: float | np.ndarray = 0.0
    x_max: float | np.ndarray = np.inf
    u_min: float | np.ndarray = 0.0
    u_max: float | np.ndarray = np.inf
    budget: float = 0.0
    cost_quad_u: float = 0.0
    price_slope: float = 0.0
    price_offset: float | np.ndarray = 0.0

    def __post_init__(self):
        if self.cost_quad_u < 0:
            raise ValueError(f"agent {self.id}: cost_quad_u must be >= 0")
        for name in ("x_min", "x_max", "u_min", "u_max", "price_offset"):
            val = getattr(self, name)
            if isinstance(val, np.ndarray):
                object.__setattr__(self, name, _as_readonly(val))

    def control_bounds(self, grid: TimeGrid):
        """(lo, hi) per-period control bounds as length-K arrays."""
        return (_per_period(self.u_min, grid.horizon_k),
                _per_period(self.u_max, grid.horizon_k))

    def state_bounds(self, grid: TimeGrid):
        """(lo, hi) per-period state bounds as length-K arrays."""
        return (_per_period(self.x_min, grid.horizon_k),
                _per_period(self.x_max, grid.horizon_k))

    def offset_vector(self, grid: TimeGrid):
        """Price offset broadcast to a length-K array."""
        return _per_period(self.price_offset, grid.horizon_k)

    def individual_cost(self, u: np.ndarray, grid: TimeGrid) -> float:
        """V(u): the agent's own cost, excluding any aggregate term."""
        u = np.asarray(u, dtype=float)
        c = self.offset_vector(grid)
        return float(self.cost_quad_u * u @ u + 2.0 * self.price_slope * c @ u)


@dataclass(frozen=True)
class AffineMap:
    """Stacked-trajectory map: states = matrix_c @ controls + offset_d."""

    matrix_c: np.ndarray
    offset_d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix_c", _as_readonly(self.matrix_c))
        object.__setattr__(self, "offset_d", _as_readonly(self.offset_d))
        k = self.offset_d.shape[0]
        if self.matrix_c.shape != (k, k):
            raise ValueError("matrix_c must be square and match offset_d")

    def trajectory(self, u: np.ndarray) -> np.ndarray:
        return self.matrix_c @ np.asarray(u, dtype=float) + self.offset_d


def lift_dynamics(agent: AgentSpec, grid: TimeGrid) -> AffineMap:
    """Unroll the one-step recursion into a single affine trajectory map.

    Returns the map whose output stacks x(1)..x(K) for input u(1)..u(K),
    with x(0) = agent.x0.  The matrix is lower triangular:
    C[t, s] = b * a**(t-s) for s <= t.
    """
    k = grid.horizon_k
    a, b = float(agent.a_coeff), float(agent.b_coeff)
    powers = a ** np.arange(k)
    mat = np.zeros((k, k))
    for t in range(k):
        mat[t, : t + 1] = b * powers[t::-1]
    offset = agent.x0 * a ** np.arange(1, k + 1)
    return AffineMap(matrix_c=mat, offset_d=offset)


@dataclass(frozen=True)
class CouplingSpec:
    """Population coupling: price map F, aggregate cost G and potential phi.

    ``f_map`` prices the aggregate z; ``phi`` is the welfare potential with
    gradient ``phi_grad``; the equilibrium/welfare equivalence requires
    F(z) = phi_grad(z) / n_agents (see verification.potential_condition_check).
    ``g_cost`` is carried for cost reporting only and never enters best
    responses.

    When F is affine, ``f_slope`` (scalar or symmetric matrix) and
    ``f_offset`` enable closed-form coordinator updates and exact
    finite-population gap certification.  ``g_quad``/``g_lin``/``g_const``
    describe G(z) = g_quad*||z||^2 + g_lin . z + g_const for the same purpose.
    """

    mode: str
    dim: int
    n_agents: int
    f_map: Callable[[np.ndarray], np.ndarray]
    f_lipschitz: float
    g_cost: Callable[[np.ndarray], float]
    phi: Callable[[np.ndarray], float]
    phi_grad: Callable[[np.ndarray], np.ndarray]
    f_slope: float | np.ndarray | None = None
    f_offset: np.ndarray | None = None
    g_quad: float = 0.0
    g_lin: np.ndarray | None = None
    g_const: float = 0.0

    def __post_init__(self):
        if self.mode not in (MODE_STATE, MODE_CONTROL):
            raise ValueError(f"unknown coupling mode {self.mode!r}")
        if self.n_agents < 1 or self.dim < 1:
            raise ValueError("n_agents and dim must be >= 1")
        for name in ("f_offset", "g_lin"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _as_readonly(val))
        if isinstance(self.f_slope, np.ndarray):
            object.__setattr__(self, "f_slope", _as_readonly(self.f_slope))

    @property
    def is_affine(self) -> bool:
        return self.f_slope is not None

    def affine_terms(self):
        """(slope_matrix, offset) with defaults filled in; requires is_affine."""
        if not self.is_affine:
            raise ValueError("coupling has no affine price data")
        slope = self.f_slope
        if np.ndim(slope) == 0:
            slope = float(slope) * np.eye(self.dim)
        offset = self.f_offset if self.f_offset is not None else np.zeros(self.dim)
        return np.asarray(slope, dtype=float), np.asarray(offset, dtype=float)


def affine_coupling(slope, n_agents: int, dim: int, offset=None,
                    mode: str = MODE_CONTROL, g_quad: float = 0.0,
                    g_lin=None, g_const: float = 0.0) -> CouplingSpec:
    """Coupling with affine price map F(z) = slope*z + offset.

    The potential is built from the symmetric part of ``slope``; when the
    slope is not symmetric no potential exists and the consistency check
    will (correctly) fail.
    """
    offset = np.zeros(dim) if offset is None else _per_period(offset, dim)
    g_lin_vec = np.zeros(dim) if g_lin is None else _per_period(g_lin, dim)
    if np.ndim(slope) == 0:
        slope_mat = float(slope) * np.eye(dim)
        lip = abs(float(slope))
    else:
        slope_mat = np.asarray(slope, dtype=float)
        lip = float(np.linalg.norm(slope_mat, 2))
    sym = 0.5 * (slope_mat + slope_mat.T)
    n = n_agents

    def f_map(z):
        return slope_mat @ z + offset

    def g_cost(z):
        z = np.asarray(z, dtype=float)
        return float(g_quad * z @ z + g_lin_vec @ z + g_const)

    def phi(z):
        z = np.asarray(z, dtype=float)
        return float(n * (0.5 * z @ (sym @ z) + offset @ z))

    def phi_grad(z):
        return n * (sym @ np.asarray(z, dtype=float) + offset)

    scalar_slope = float(slope) if np.ndim(slope) == 0 else slope_mat
    return CouplingSpec(mode=mode, dim=dim, n_agents=n_agents, f_map=f_map,
                        f_lipschitz=lip, g_cost=g_cost, phi=phi,
                        phi_grad=phi_grad, f_slope=scalar_slope,
                        f_offset=offset, g_quad=g_quad, g_lin=g_lin_vec,
                        g_const=g_const)


def ev_coupling(eta: float, gamma: float, n_agents: int, horizon_k: int) -> CouplingSpec:
    """Charging-game coupling: price 2*gamma*(z + c) with deviation penalty eta.

    Decomposing eta*||u - z||^2 + 2*gamma*(z + c)' u  into individual and
    aggregate parts gives F(z) = 2*(gamma - eta)*z, G(z) = eta*||z||^2, and
    the potential phi(z) = N*(gamma - eta)*||z||^2.  The offset c belongs to
    the individual cost (AgentSpec.price_offset).  Requires eta < gamma so
    the price map is increasing.
    """
    if eta < 0 or gamma <= 0:
        raise ValueError("need eta >= 0 and gamma > 0")
    if eta >= gamma:
        raise ValueError("charging coupling needs eta < gamma")
    return affine_coupling(slope=2.0 * (gamma - eta), n_agents=n_agents,
                           dim=horizon_k, mode=MODE_CONTROL, g_quad=eta)


@dataclass(frozen=True)
class ProblemInstance:
    """N agents, their coupling, and the shared time grid."""

    agents: tuple[AgentSpec, ...]
    coupling: CouplingSpec
    grid: TimeGrid

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if len(self.agents) < 1:
            raise ValueError("need at least one agent")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def lifted(self, agent: AgentSpec) -> AffineMap:
        return lift_dynamics(agent, self.grid)


@dataclass
class Solution:
    """Converged controls and diagnostics returned by a coordination run.

    ``residual_trace`` has one row per iteration with columns
    (iter, primal_res, dual_res, welfare, z_norm); ``control_norm_trace``
    holds ||u_i|| per iteration and agent.  ``diagnostics`` always carries
    the final welfare; verification results are attached by the harness.
    """

    controls: np.ndarray
    states: np.ndarray
    aggregate_z: np.ndarray
    dual_price: np.ndarray
    iterations: int
    converged: bool
    algorithm: str
    residual_trace: np.ndarray
    control_norm_trace: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def aggregate_of(instance: ProblemInstance, controls: np.ndarray) -> np.ndarray:
    """Population aggregate z of a control profile, per the coupling mode."""
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (instance.n_agents, instance.grid.horizon_k):
        raise ValueError("controls must have shape (n_agents, horizon_k)")
    if instance.coupling.mode == MODE_CONTROL:
        return controls.mean(axis=0)
    states = state_trajectories(instance, controls)
    return states.mean(axis=0)


def state_trajectories(instance: ProblemInstance, controls: np.ndarray) -> np.ndarray:
    """Per-agent state paths induced by ``controls`` (shape (N, K))."""
    controls = np.asarray(controls, dtype=float)
    return np.stack([instance.lifted(ag).trajectory(u)
                     for ag, u in zip(instance.agents, controls)])


def agent_cost(agent: AgentSpec, u: np.ndarray, z: np.ndarray,
               grid: TimeGrid | None = None) -> float:
    """Individual charging-game cost at control u against aggregate z.

    Evaluates eta*||u - z||^2 + 2*gamma*(z + c)' u with the agent's own
    (eta, gamma, c) weights; algebraically identical to
    V(u) + F(z).u + G(z) for the matching coupling.
    """
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    if u.shape != z.shape:
        raise ValueError(f"control shape {u.shape} != aggregate shape {z.shape}")
    grid = grid or TimeGrid(horizon_k=u.shape[0])
    c = agent.offset_vector(grid)
    diff = u - z
    return float(agent.cost_quad_u * diff @ diff
                 + 2.0 * agent.price_slope * (z + c) @ u)


def social_welfare(instance: ProblemInstance, controls: np.ndarray) -> float:
    """Welfare objective: sum of individual costs plus the potential at z."""
    controls = np.asarray(controls, dtype=float)
    z = aggregate_of(instance, controls)
    total = sum(ag.individual_cost(u, instance.grid)
                for ag, u in zip(instance.agents, controls))
    return float(total + instance.coupling.phi(z))


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------

def feasible_control(agent: AgentSpec, grid: TimeGrid) -> np.ndarray | None:
    """A control satisfying box, budget and state constraints, or None.

    Pure-integrator agents whose minimum-rate path already respects the
    state box are filled greedily (earliest period first); everything else
    falls back to a feasibility LP.
    """
    k = grid.horizon_k
    lo, hi = agent.control_bounds(grid)
    xlo, xhi = agent.state_bounds(grid)
    if np.any(lo > hi + FEAS_TOL):
        return None
    total_lo, total_hi = lo.sum(), hi.sum()
    if not (total_lo - FEAS_TOL <= agent.budget <= total_hi + FEAS_TOL):
        return None

    if agent.a_coeff == 1.0 and agent.b_coeff == 1.0 and np.all(lo >= 0):
        path = agent.x0 + np.cumsum(lo)
        if np.all(path >= xlo - FEAS_TOL):
            u = lo.copy()
            x = path.copy()
            remaining = agent.budget - u.sum()
            for t in range(k):
                if remaining <= FEAS_TOL:
                    break
                # adding at t raises every later state by the same amount
                head = min(hi[t] - u[t], np.min(xhi[t:] - x[t:]), remaining)
                if head > 0:
                    u[t] += head
                    x[t:] += head
                    remaining -= head
            if abs(u.sum() - agent.budget) <= FEAS_TOL:
                return np.clip(u, lo, hi)
            return None

    lift = lift_dynamics(agent, grid)
    a_ub = np.vstack([lift.matrix_c, -lift.matrix_c])
    b_ub = np.concatenate([xhi - lift.offset_d, lift.offset_d - xlo])
    finite = np.isfinite(b_ub)
    res = linprog(c=np.zeros(k), A_ub=a_ub[finite], b_ub=b_ub[finite],
                  A_eq=np.ones((1, k)), b_eq=[agent.budget],
                  bounds=list(zip(lo, hi)), method="highs")
    return res.x if res.status == 0 else None


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validate_instance: ok iff no violations were found."""

    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        return "OK" if self.ok else "\n".join(self.violations)


def validate_instance(instance: ProblemInstance) -> ValidationReport:
    """Check dimension consistency and nonemptiness of every feasible set.

    Violations are returned as data, one message per failed constraint with
    the offending agent id; nothing raises.
    """
    problems: list[str] = []
    k = instance.grid.horizon_k
    coup = instance.coupling
    if coup.n_agents != instance.n_agents:
        problems.append(f"coupling expects {coup.n_agents} agents, "
                        f"instance has {instance.n_agents}")
    if coup.dim != k:
        problems.append(f"coupling dimension {coup.dim} != horizon {k}")

    for agent in instance.agents:
        tag = f"agent {agent.id}"
        try:
            lo, hi = agent.control_bounds(instance.grid)
            xlo, xhi = agent.state_bounds(instance.grid)
        except ValueError as exc:
            problems.append(f"{tag}: {exc}")
            continue
        if np.any(lo > hi):
            problems.append(f"{tag}: u_min exceeds u_max")
            continue
        if np.any(xlo > xhi):
            problems.append(f"{tag}: x_min exceeds x_max")
            continue
        if agent.budget > hi.sum() + FEAS_TOL:
            problems.append(f"{tag}: budget exceeds capacity "
                            f"({agent.budget:g} > {hi.sum():g})")
            continue
        if agent.budget < lo.sum() - FEAS_TOL:
            problems.append(f"{tag}: budget below minimum total "
                            f"({agent.budget:g} < {lo.sum():g})")
            continue
        if feasible_control(agent, instance.grid) is None:
            problems.append(f"{tag}: no control path satisfies the state box")
    return ValidationReport(violations=tuple(problems))

"""
Solution quality certificates.

* ``epsilon_nash_gap``      - the literal unilateral-deviation gap of every
                              agent against the exact finite-population
                              aggregate (including the agent's own share).
* ``potential_condition_check`` - does F(z) match phi'(z)/N, and is the
                              price Jacobian symmetric (a potential exists)?
* ``duality_gap``           - primal welfare minus the decomposed dual value
                              at the reported price.
* ``lemma1_bound_estimate`` - Monte Carlo check that the coupling between
                              one agent and the population average decays
                              like 2*L*C/N.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .best_response import BestResponseQuery, best_response_value, \
    _solve_polytope_qp, state_box_redundant
from .model import (MODE_CONTROL, AgentSpec, CouplingSpec, ProblemInstance,
                    Solution, lift_dynamics)
from .qp import QpSettings, project_box_budget


@dataclass(frozen=True)
class NashGapReport:
    """Per-agent unilateral improvement and its maximum epsilon."""

    per_agent_gap: tuple
    max_gap: float
    n_agents: int
    mean_cost_magnitude: float
    opt_tol: float = 1e-7

    def __post_init__(self):
        gaps = np.array([g for _, g in self.per_agent_gap])
        if gaps.size != self.n_agents:
            raise ValueError("per_agent_gap length != n_agents")
        if abs(self.max_gap - gaps.max()) > 1e-12:
            raise ValueError("max_gap inconsistent with per-agent gaps")
        if gaps.min() < -10 * self.opt_tol:
            raise ValueError(f"negative gap {gaps.min():.3e} beyond tolerance:"
                             " inner solve beat the certified solution")


def _coupled_map(agent: AgentSpec, instance: ProblemInstance):
    """(E, t0) with coupled(u) = E u + t0 for this agent."""
    k = instance.grid.horizon_k
    if instance.coupling.mode == MODE_CONTROL:
        return np.eye(k), np.zeros(k)
    lift = lift_dynamics(agent, instance.grid)
    return lift.matrix_c, lift.offset_d


def _true_cost(agent: AgentSpec, instance: ProblemInstance, u: np.ndarray,
               rest: np.ndarray) -> float:
    """Full game cost of agent at u with everyone else's coupled sum frozen."""
    coup = instance.coupling
    e_mat, t0 = _coupled_map(agent, instance)
    coupled = e_mat @ u + t0
    z = (coupled + rest) / instance.n_agents
    f_val = np.asarray(coup.f_map(z), dtype=float)
    return (agent.individual_cost(u, instance.grid)
            + float(f_val @ coupled) + coup.g_cost(z))


def _deviation_quadratic(agent: AgentSpec, instance: ProblemInstance,
                         rest: np.ndarray):
    """(P, q) of the agent's exact cost in u with the others frozen.

    Requires an affine price map; the aggregate z = (E u + t0 + rest)/N is
    substituted into V + F(z).coupled + G(z), which stays quadratic.
    """
    coup = instance.coupling
    if not coup.is_affine:
        raise NotImplementedError(
            "exact deviation gaps need an affine price map")
    n = instance.n_agents
    slope, offset = coup.affine_terms()
    e_mat, t0 = _coupled_map(agent, instance)
    a_mat = e_mat / n
    s = (t0 + rest) / n
    g_lin = coup.g_lin if coup.g_lin is not None else np.zeros(coup.dim)

    quad = (2.0 * agent.cost_quad_u * np.eye(instance.grid.horizon_k)
            + a_mat.T @ slope.T @ e_mat + e_mat.T @ slope @ a_mat
            + 2.0 * coup.g_quad * a_mat.T @ a_mat)
    lin = (2.0 * agent.price_slope * agent.offset_vector(instance.grid)
           + a_mat.T @ (slope.T @ t0)
           + e_mat.T @ (slope @ s + offset)
           + a_mat.T @ (2.0 * coup.g_quad * s + g_lin))
    return quad, lin


def epsilon_nash_gap(instance: ProblemInstance, solution: Solution,
                     settings: QpSettings | None = None,
                     opt_tol: float = 1e-7) -> NashGapReport:
    """Certify the deviation gap of every agent at ``solution``.

    For each agent the remaining population is frozen and the agent's exact
    problem, self-influence on the aggregate included, is re-solved; the gap
    is its certified cost minus that optimum.  The maximum gap is the
    epsilon for which the profile is an epsilon-equilibrium.
    """
    coup = instance.coupling
    n = instance.n_agents
    k = instance.grid.horizon_k
    coupled_all = np.stack([
        _coupled_map(a, instance)[0] @ u + _coupled_map(a, instance)[1]
        for a, u in zip(instance.agents, solution.controls)])
    total = coupled_all.sum(axis=0)

    gaps, costs = [], []
    for i, agent in enumerate(instance.agents):
        rest = total - coupled_all[i]
        current = _true_cost(agent, instance, solution.controls[i], rest)
        quad, lin = _deviation_quadratic(agent, instance, rest)
        diag = quad[0, 0]
        if (coup.mode == MODE_CONTROL and np.ndim(coup.f_slope) == 0
                and diag > 0 and state_box_redundant(agent, instance.grid)):
            lo, hi = agent.control_bounds(instance.grid)
            u_best = project_box_budget(-lin / diag, lo, hi, agent.budget)
        else:
            extra = quad - 2.0 * agent.cost_quad_u * np.eye(k)
            u_best = _solve_polytope_qp(agent, instance.grid,
                                        2.0 * agent.cost_quad_u, lin, extra,
                                        settings)
        best = _true_cost(agent, instance, u_best, rest)
        gaps.append((agent.id, current - best))
        costs.append(abs(current))
    max_gap = max(g for _, g in gaps)
    return NashGapReport(per_agent_gap=tuple(gaps), max_gap=float(max_gap),
                         n_agents=n,
                         mean_cost_magnitude=float(np.mean(costs)),
                         opt_tol=opt_tol)


class PotentialCheck(NamedTuple):
    passed: bool
    max_deviation: float


def potential_condition_check(coupling: CouplingSpec,
                              n_agents: int | None = None, probes: int = 50,
                              tol: float = 1e-6, seed: int = 0,
                              scale: float = 1.0) -> PotentialCheck:
    """Probe F(z) = phi'(z)/N and price-Jacobian symmetry.

    Probe points are drawn uniformly from the box [-10, 10]^dim times
    ``scale``; the potential gradient is taken by central differences and
    deviations are measured relative to max(1, ||F(z)||).  Deterministic
    for a fixed seed.
    """
    if probes < 1:
        raise ValueError("need at least one probe point")
    n = n_agents or coupling.n_agents
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        z = rng.uniform(-10.0 * scale, 10.0 * scale, coupling.dim)
        f_val = np.asarray(coupling.f_map(z), dtype=float)
        ref = max(1.0, float(np.max(np.abs(f_val))))
        grad = np.empty(coupling.dim)
        jac = np.empty((coupling.dim, coupling.dim))
        for j in range(coupling.dim):
            h = 1e-3 * (1.0 + abs(z[j]))
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            grad[j] = (coupling.phi(zp) - coupling.phi(zm)) / (2 * h)
            jac[:, j] = (np.asarray(coupling.f_map(zp), dtype=float)
                         - np.asarray(coupling.f_map(zm))) / (2 * h)
        dev = float(np.max(np.abs(f_val - grad / n))) / ref
        asym = float(np.max(np.abs(jac - jac.T))) / max(1.0, np.max(np.abs(jac)))
        worst = max(worst, dev, asym)
    return PotentialCheck(passed=worst <= tol, max_deviation=worst)


def _planner_min_value(coupling: CouplingSpec, lam: np.ndarray) -> float:
    """min_z phi(z) - N * lam . z, the coordinator part of the dual value."""
    n = coupling.n_agents
    if coupling.is_affine:
        slope, offset = coupling.affine_terms()
        sym = 0.5 * (slope + slope.T)
        resid = lam - offset
        if np.linalg.norm(sym, ord=np.inf) < 1e-14:
            # linear potential: bounded only when the price matches it
            return 0.0 if np.linalg.norm(resid, np.inf) <= 1e-9 else -np.inf
        z = np.linalg.solve(sym, resid)
    else:
        from scipy.optimize import root
        sol = root(lambda zz: coupling.phi_grad(zz) - n * lam,
                   x0=np.zeros(coupling.dim), tol=1e-12)
        if not sol.success:
            raise RuntimeError(f"planner minimization failed: {sol.message}")
        z = sol.x
    return float(coupling.phi(z) - n * lam @ z)


def duality_gap(instance: ProblemInstance, solution: Solution,
                settings: QpSettings | None = None) -> float:
    """Primal welfare minus the decomposed dual value at the solution price.

    Nonnegative by weak duality (up to solver tolerance) and zero at a
    certified optimum under the potential condition.
    """
    from .model import social_welfare

    lam = solution.dual_price
    primal = social_welfare(instance, solution.controls)
    agent_part = sum(
        best_response_value(BestResponseQuery(agent=a, grid=instance.grid,
                                              price_signal=lam,
                                              mode=instance.coupling.mode),
                            settings)
        for a in instance.agents)
    return primal - (agent_part + _planner_min_value(instance.coupling, lam))


@dataclass(frozen=True)
class Lemma1Stats:
    """Monte Carlo estimate of the single-agent coupling bias bound."""

    n_population: int
    trials: int
    mean_lhs: float
    bound_2lc_over_n: float
    std_error: float
    lipschitz_l: float
    second_moment_c: float

    def __post_init__(self):
        if min(self.mean_lhs, self.bound_2lc_over_n, self.std_error) < 0:
            raise ValueError("statistics must be nonnegative")


def lemma1_bound_estimate(lipschitz_l: float, second_moment_c: float,
                          n_population: int, trials: int = 10000,
                          seed: int = 0, dim: int = 4,
                          ball_radius: float | None = None,
                          center: np.ndarray | None = None) -> Lemma1Stats:
    """Estimate |E(F(m).x_1) - F(Em).E x_1| for the affine map F(m) = L*m.

    States are i.i.d. uniform on a ball of radius sqrt(C) (so the second
    moment is bounded by C exactly) around ``center``; the estimate must
    sit below 2*L*C/N plus Monte Carlo noise.  ``ball_radius=0`` gives the
    deterministic degenerate case.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if n_population < 1:
        raise ValueError("population must be >= 1")
    radius = np.sqrt(second_moment_c) if ball_radius is None else ball_radius
    mid = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)

    chunk = max(1, int(2_000_000 / max(1, n_population * dim)))
    sum_term = sum_sq = 0.0
    sum_m = np.zeros(dim)
    sum_x1 = np.zeros(dim)
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        normals = rng.standard_normal((b, n_population, dim))
        normals /= np.linalg.norm(normals, axis=2, keepdims=True)
        radii = radius * rng.random((b, n_population, 1)) ** (1.0 / dim)
        x = mid + radii * normals
        m = x.mean(axis=1)
        term = lipschitz_l * np.einsum("bd,bd->b", m, x[:, 0, :])
        sum_term += term.sum()
        sum_sq += (term ** 2).sum()
        sum_m += m.sum(axis=0)
        sum_x1 += x[:, 0, :].sum(axis=0)
        done += b

    mean_term = sum_term / trials
    mean_m = sum_m / trials
    mean_x1 = sum_x1 / trials
    lhs = abs(mean_term - lipschitz_l * mean_m @ mean_x1)
    var = max(0.0, sum_sq / trials - mean_term ** 2)
    return Lemma1Stats(
        n_population=n_population, trials=trials, mean_lhs=float(lhs),
        bound_2lc_over_n=2.0 * lipschitz_l * second_moment_c / n_population,
        std_error=float(np.sqrt(var / trials)),
        lipschitz_l=lipschitz_l, second_moment_c=second_moment_c)

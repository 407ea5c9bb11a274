"""
Equilibrium-finding algorithms driven by a dual price on the aggregate.

All three methods exploit the welfare equivalence: the game equilibrium is
the saddle point of

    sum_i V_i(u_i) + phi(z) + lambda . (sum_i coupled_i - N z),

whose coordinator stationarity gives lambda = phi'(z)/N = F(z).

* ``primal_dual_solve`` - dual ascent with a constant price step.
* ``mann_solve``        - the same iteration with diminishing steps
                          beta_k = beta0 / k**p (0 < p <= 1).
* ``admm_solve``        - consensus splitting of the welfare program:
                          proximal agent blocks, a shared aggregate block
                          carrying phi, and scaled dual updates.

Per iteration the agent updates are mutually independent (read-only
instance data in, one control out); the coordinator and price updates are
the only serial steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import root

from .best_response import BestResponseQuery, best_response, prox_response
from .model import (MODE_CONTROL, CouplingSpec, ProblemInstance, Solution,
                    aggregate_of, feasible_control, social_welfare,
                    state_trajectories)
from .qp import QpSettings


@dataclass(frozen=True)
class StepSchedule:
    """Price step rule: constant beta0, or beta0 / k**exponent (Mann).

    Diminishing steps need beta_k -> 0 with divergent sum, hence
    0 < exponent <= 1.  ``beta0 = None`` defers to a per-instance default.
    """

    kind: str = "mann"
    beta0: float | None = None
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "mann"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "mann" and not 0 < self.exponent <= 1:
            raise ValueError("mann schedule needs 0 < exponent <= 1")
        if self.beta0 is not None and self.beta0 <= 0:
            raise ValueError("beta0 must be positive")

    def resolve_beta0(self, instance: ProblemInstance) -> float:
        """Default base step: full averaging weight on the first iteration
        for constant schedules the conservative 1/(N * L_phi)."""
        if self.beta0 is not None:
            return self.beta0
        coup = instance.coupling
        n = instance.n_agents
        lip = max(coup.f_lipschitz, 1e-12)
        if self.kind == "mann":
            return lip / n          # first-step averaging weight ~ 1
        return 1.0 / (n * n * lip)  # 1 / (N * Lipschitz of phi')

    def step(self, k: int, beta0: float) -> float:
        if self.kind == "constant":
            return beta0
        return beta0 / k ** self.exponent


@dataclass(frozen=True)
class SolverState:
    """One primal-dual iterate: controls, coordinator aggregate, price."""

    controls: np.ndarray
    aggregate_z: np.ndarray
    dual_price: np.ndarray
    iter: int = 0
    residual_trace: tuple = ()


def initial_state(instance: ProblemInstance) -> SolverState:
    """Feasible start: greedy controls, their aggregate, price on the
    stationarity manifold lambda = F(z)."""
    controls = []
    for agent in instance.agents:
        u = feasible_control(agent, instance.grid)
        if u is None:
            raise ValueError(f"agent {agent.id} has an empty feasible set")
        controls.append(u)
    controls = np.stack(controls)
    z = aggregate_of(instance, controls)
    lam = np.asarray(instance.coupling.f_map(z), dtype=float)
    return SolverState(controls=controls, aggregate_z=z, dual_price=lam)


def coordinator_update(coupling: CouplingSpec, lam: np.ndarray,
                       fallback: np.ndarray | None = None) -> np.ndarray:
    """Aggregate block of the dual: solve phi'(z) = N * lambda.

    Affine price maps give the closed form slope @ z = lambda - offset.  A
    zero slope leaves z unconstrained; the current aggregate is returned so
    decoupled instances fix in one step.  Non-affine potentials are solved
    with a damped root finder started at ``fallback``.
    """
    lam = np.asarray(lam, dtype=float)
    if coupling.is_affine:
        slope, offset = coupling.affine_terms()
        sym = 0.5 * (slope + slope.T)  # the part phi actually integrates
        resid = lam - offset
        if np.linalg.norm(sym, ord=np.inf) < 1e-14:
            if np.linalg.norm(resid, ord=np.inf) > 1e-9:
                raise ValueError("coordinator problem is unbounded: "
                                 "zero price slope with nonzero price")
            return (np.zeros(coupling.dim) if fallback is None
                    else np.asarray(fallback, dtype=float))
        return np.linalg.solve(sym, resid)
    x0 = np.zeros(coupling.dim) if fallback is None else np.asarray(fallback, float)
    sol = root(lambda z: coupling.phi_grad(z) / coupling.n_agents - lam,
               x0=x0, tol=1e-12)
    if not sol.success:
        raise RuntimeError(f"coordinator update failed: {sol.message}")
    return sol.x


def _responses(instance: ProblemInstance, price: np.ndarray,
               settings: QpSettings | None) -> np.ndarray:
    mode = instance.coupling.mode
    return np.stack([
        best_response(BestResponseQuery(agent=a, grid=instance.grid,
                                        price_signal=price, mode=mode),
                      settings)
        for a in instance.agents])


def primal_dual_step(state: SolverState, instance: ProblemInstance,
                     beta: float,
                     settings: QpSettings | None = None) -> SolverState:
    """One pass of: agent best responses at the current price, coordinator
    aggregate from phi'(z) = N*lambda, then the price ascent
    lambda += beta * N * (mean coupled - z)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = instance.n_agents
    controls = _responses(instance, state.dual_price, settings)
    mean_coupled = aggregate_of(instance, controls)
    z = coordinator_update(instance.coupling, state.dual_price,
                           fallback=mean_coupled)
    lam = state.dual_price + beta * n * (mean_coupled - z)

    primal = float(np.linalg.norm(mean_coupled - z))
    dual = float(np.linalg.norm(z - state.aggregate_z))
    welfare = social_welfare(instance, controls)
    row = (state.iter + 1, primal, dual, welfare, float(np.linalg.norm(z)))
    return replace(state, controls=controls, aggregate_z=z, dual_price=lam,
                   iter=state.iter + 1,
                   residual_trace=state.residual_trace + (row,))


def _finalize(instance: ProblemInstance, algorithm: str, controls, dual_price,
              iterations, converged, trace_rows, norm_rows) -> Solution:
    controls = np.asarray(controls, dtype=float)
    states = state_trajectories(instance, controls)
    z = aggregate_of(instance, controls)
    trace = np.asarray(trace_rows, dtype=float).reshape(-1, 5)
    norms = np.asarray(norm_rows, dtype=float).reshape(-1, instance.n_agents)
    return Solution(controls=controls, states=states, aggregate_z=z,
                    dual_price=np.asarray(dual_price, dtype=float),
                    iterations=iterations, converged=converged,
                    algorithm=algorithm, residual_trace=trace,
                    control_norm_trace=norms,
                    diagnostics={"welfare": social_welfare(instance, controls)})


def _run_price_iteration(instance, schedule, max_iter, tol, settings, name):
    state = initial_state(instance)
    beta0 = schedule.resolve_beta0(instance)
    norm_rows, converged = [], False
    for k in range(1, max_iter + 1):
        state = primal_dual_step(state, instance, schedule.step(k, beta0),
                                 settings)
        norm_rows.append(np.linalg.norm(state.controls, axis=1))
        _, primal, dual, _, _ = state.residual_trace[-1]
        if primal <= tol and dual <= tol:
            converged = True
            break
    return _finalize(instance, name, state.controls, state.dual_price,
                     state.iter, converged, state.residual_trace, norm_rows)


def mann_solve(instance: ProblemInstance,
               schedule: StepSchedule | None = None, max_iter: int = 200,
               tol: float = 1e-6,
               settings: QpSettings | None = None) -> Solution:
    """Primal-dual iteration with diminishing price steps.

    Stops when the aggregate mismatch ||mean coupled - z|| and the
    coordinator movement ||z_k - z_{k-1}|| both fall below ``tol``;
    hitting ``max_iter`` returns the last iterate flagged unconverged.
    """
    schedule = schedule or StepSchedule(kind="mann")
    if schedule.kind != "mann":
        raise ValueError("mann_solve needs a schedule of kind 'mann'")
    return _run_price_iteration(instance, schedule, max_iter, tol, settings,
                                "mann")


def primal_dual_solve(instance: ProblemInstance, beta: float | None = None,
                      max_iter: int = 200, tol: float = 1e-6,
                      settings: QpSettings | None = None) -> Solution:
    """Constant-step variant of the price iteration (slow but steady)."""
    schedule = StepSchedule(kind="constant", beta0=beta)
    return _run_price_iteration(instance, schedule, max_iter, tol, settings,
                                "primal-dual")


def _admm_coordinator(coupling: CouplingSpec, v: np.ndarray,
                      rho: float) -> np.ndarray:
    """Aggregate block: argmin_z phi(z) + (N*rho/2) * ||z - v||^2."""
    if coupling.is_affine:
        slope, offset = coupling.affine_terms()
        return np.linalg.solve(slope + rho * np.eye(coupling.dim),
                               rho * v - offset)
    n = coupling.n_agents
    sol = root(lambda z: coupling.phi_grad(z) + n * rho * (z - v), x0=v,
               tol=1e-12)
    if not sol.success:
        raise RuntimeError(f"aggregate block failed: {sol.message}")
    return sol.x


def admm_solve(instance: ProblemInstance, rho_admm: float = 0.05,
               tol: float = 1e-6, max_iter: int = 200,
               settings: QpSettings | None = None) -> Solution:
    """Consensus splitting of the welfare program.

    Each iteration runs the proximal agent blocks against the shifted
    consensus target, the aggregate block carrying phi, and the scaled dual
    update; the reported price rho*w then satisfies lambda = F(z) exactly
    at every iterate.  Stopping matches the price iteration: aggregate
    mismatch and coordinator movement below ``tol``, plus stationary agent
    blocks (max_i ||u_i - u_i_prev|| <= tol) so a converged run certifies
    the frozen-price optimality conditions at the same scale.
    """
    if rho_admm <= 0:
        raise ValueError("rho_admm must be positive")
    mode = instance.coupling.mode
    n = instance.n_agents
    state = initial_state(instance)
    controls = state.controls
    coupled = (controls if mode == MODE_CONTROL
               else state_trajectories(instance, controls))
    mean_coupled = coupled.mean(axis=0)
    z = mean_coupled
    w = state.dual_price / rho_admm

    trace_rows, norm_rows, converged = [], [], False
    iterations = 0
    for k in range(1, max_iter + 1):
        shift = z - mean_coupled - w
        new_controls = np.stack([
            prox_response(agent, instance.grid, coupled[i] + shift, rho_admm,
                          mode, settings)
            for i, agent in enumerate(instance.agents)])
        max_shift = float(np.max(np.linalg.norm(new_controls - controls,
                                                axis=1)))
        controls = new_controls
        coupled = (controls if mode == MODE_CONTROL
                   else state_trajectories(instance, controls))
        mean_coupled = coupled.mean(axis=0)
        z_new = _admm_coordinator(instance.coupling, mean_coupled + w,
                                  rho_admm)
        w = w + mean_coupled - z_new

        primal = float(np.linalg.norm(mean_coupled - z_new))
        dual = float(np.linalg.norm(z_new - z))
        z = z_new
        welfare = social_welfare(instance, controls)
        trace_rows.append((k, primal, dual, welfare,
                           float(np.linalg.norm(z))))
        norm_rows.append(np.linalg.norm(controls, axis=1))
        iterations = k
        if primal <= tol and dual <= tol and max_shift <= tol:
            converged = True
            break
    return _finalize(instance, "admm", controls, rho_admm * w, iterations,
                     converged, trace_rows, norm_rows)


def fixed_point_residual(instance: ProblemInstance, price: np.ndarray,
                         settings: QpSettings | None = None) -> float:
    """Mismatch of the equilibrium equations at a candidate price:
    ||price - F(mean coupled under best responses to price)||.  Zero exactly
    at a mean-field equilibrium."""
    price = np.asarray(price, dtype=float)
    controls = _responses(instance, price, settings)
    mean_coupled = aggregate_of(instance, controls)
    f_val = np.asarray(instance.coupling.f_map(mean_coupled), dtype=float)
    return float(np.linalg.norm(price - f_val))

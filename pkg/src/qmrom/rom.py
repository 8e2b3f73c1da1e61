"""Online hyperreduced quadratic-manifold Newton solver.

Each time step accumulates a reduced increment du from the last
converged state and updates the full state through the manifold decode
of that increment,

    U = U_start + phi_lin @ du + phi_nonlin @ xi @ g(du),

so the reduced Jacobian correction K_red + Kbar_red @ xi @ W(du), with W
the feature Jacobian refreshed at the accumulated increment every
iteration, is the exact linearization of the update law. Weighted
residual and stiffness sums run over the selected elements only;
internal variables of unselected elements stay frozen. Prescribed DOFs
are injected, never reconstructed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ecsw import EcswWeights
from .errors import (
    ConstitutiveFailureError,
    InvalidInputError,
    ReducedSolverError,
    SingularMatrixError,
    StepFailureError,
)
from .fom import (
    LoadingProgram,
    Mesh1D,
    _bc_values,
    _commit,
    dirichlet_bc,
    elements_residual,
    elements_tangent,
    initial_solution,
)
from .manifold import ManifoldBasis, poly_features, poly_features_jacobian
from .material import MaterialParams, QpState
from .numerics import solve_dense


@dataclass
class RomSolution:
    """Per-step record of a reduced run."""

    solutions: list[np.ndarray] = field(default_factory=list)
    reduced_increments: list[np.ndarray] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    reaction_force: list[float] = field(default_factory=list)
    u_prescribed: list[float] = field(default_factory=list)
    step_times_solve: list[float] = field(default_factory=list)
    step_times_wall: list[float] = field(default_factory=list)
    bisected_steps: list[int] = field(default_factory=list)
    failed: bool = False
    failure_step: int | None = None

    @property
    def n_step(self) -> int:
        return len(self.solutions)


def include_boundary_elements(weights: EcswWeights, mesh: Mesh1D,
                              bc_dofs: np.ndarray) -> EcswWeights:
    """Force elements adjacent to Dirichlet DOFs into the selection.

    Reaction recovery and boundary-condition injection read these
    elements, so they join the set with unit weight when absent.
    """
    nodes = np.unique(np.asarray(bc_dofs, dtype=int) // 3)
    needed = set()
    for node in nodes:
        if node > 0:
            needed.add(node - 1)
        if node < mesh.n_elements:
            needed.add(node)
    missing = sorted(needed - set(weights.element_ids.tolist()))
    if not missing:
        return weights
    ids = np.concatenate([weights.element_ids, np.asarray(missing, dtype=int)])
    vals = np.concatenate([weights.weights, np.ones(len(missing))])
    return EcswWeights(ids, vals, weights.tau, weights.achieved_residual_ratio)


def reduced_assemble(basis: ManifoldBasis, weights: EcswWeights, mesh: Mesh1D,
                     states: QpState, U_current, U_prev, params: MaterialParams,
                     dt: float):
    """Weighted reduced residual and stiffness blocks over selected elements.

    Returns (Rbar_red (r,), K_red (r, r), Kbar_red (r, 3q), responses).
    """
    r = basis.r
    nq = basis.phi_nonlin.shape[1]
    eids = weights.element_ids
    if eids.size == 0:
        return np.zeros(r), np.zeros((r, r)), np.zeros((r, nq)), []
    w = weights.weights
    edofs = mesh.element_dofs[eids]
    phi_e = basis.phi_lin[edofs]             # (n_s, 6, r)
    phibar_e = basis.phi_nonlin[edofs]       # (n_s, 6, 3q)

    r_e, responses = elements_residual(mesh, states, U_current, U_prev, params, dt, eids)
    k_e = elements_tangent(mesh, states, U_current, U_prev, params, dt, eids,
                           base_responses=(r_e, responses))

    r_red = np.einsum("e,eij,ei->j", w, phi_e, r_e)
    k_phi = np.einsum("eij,ejk->eik", k_e, phi_e)
    k_red = np.einsum("e,eij,eik->jk", w, phi_e, k_phi)
    k_phibar = np.einsum("eij,ejk->eik", k_e, phibar_e)
    kbar_red = np.einsum("e,eij,eik->jk", w, phi_e, k_phibar)
    return r_red, k_red, kbar_red, responses


def rom_newton_step(basis: ManifoldBasis, weights: EcswWeights, mesh: Mesh1D,
                    states: QpState, U_start, U_prev, du_accum, bc, params: MaterialParams,
                    dt: float):
    """One reduced Newton iteration at the accumulated increment du_accum.

    Returns (du_accum_next, U_next, solve_seconds). The caller owns
    convergence control; the residual it tests comes from
    :func:`reduced_assemble` at the returned state.
    """
    u_cur = reconstruct(basis, U_start, du_accum, bc)
    r_red, k_red, kbar_red, _ = reduced_assemble(basis, weights, mesh, states, u_cur,
                                                 U_prev, params, dt)
    w_jac = poly_features_jacobian(du_accum, basis.p)
    system = k_red + kbar_red @ (basis.xi @ w_jac)
    t0 = time.perf_counter()
    try:
        delta = solve_dense(system, -r_red)
    except SingularMatrixError as exc:
        raise ReducedSolverError(f"reduced system singular: {exc}") from exc
    solve_s = time.perf_counter() - t0
    du_next = du_accum + delta
    return du_next, reconstruct(basis, U_start, du_next, bc), solve_s


def reconstruct(basis: ManifoldBasis, U_start, du_accum, bc) -> np.ndarray:
    u = U_start + basis.phi_lin @ du_accum
    if basis.phi_nonlin.shape[1]:
        u = u + basis.phi_nonlin @ (basis.xi @ poly_features(du_accum, basis.p))
    u[bc.dofs] = bc.values
    return u


def _solve_reduced_step(basis, weights, mesh, states, U_prev, bc, params, dt, tol, max_iter):
    du = np.zeros(basis.r)
    u_cur = reconstruct(basis, U_prev, du, bc)
    solve_time = 0.0
    scale = None
    for it in range(max_iter + 1):
        r_red, k_red, kbar_red, responses = reduced_assemble(
            basis, weights, mesh, states, u_cur, U_prev, params, dt)
        rnorm = float(np.linalg.norm(r_red))
        if scale is None:
            scale = max(1.0, rnorm)
        if rnorm <= tol * scale:
            committed = _commit(states, responses, weights.element_ids)
            return u_cur, du, committed, it, solve_time
        if it == max_iter:
            break
        w_jac = poly_features_jacobian(du, basis.p)
        system = k_red + kbar_red @ (basis.xi @ w_jac)
        t0 = time.perf_counter()
        try:
            delta = solve_dense(system, -r_red)
        except SingularMatrixError as exc:
            raise ReducedSolverError(f"reduced system singular: {exc}") from exc
        solve_time += time.perf_counter() - t0
        du = du + delta
        u_cur = reconstruct(basis, U_prev, du, bc)
    raise StepFailureError(
        f"reduced Newton did not converge within {max_iter} iterations "
        f"(residual {rnorm:.3e})", residual_norm=rnorm)


def _advance_reduced(basis, weights, mesh, states, U_prev, values_prev, bc_template,
                     values_target, dt, params, tol, max_iter, depth, max_bisection, stats):
    try:
        out = _solve_reduced_step(basis, weights, mesh, states, U_prev,
                                  bc_template.with_values(values_target), params, dt,
                                  tol, max_iter)
        u_cur, du, committed, iterations, solve_time = out
        stats["solve"] += solve_time
        stats["iterations"] += iterations
        stats["du"] = stats["du"] + du
        return u_cur, committed
    except (StepFailureError, ConstitutiveFailureError, ReducedSolverError):
        if depth >= max_bisection:
            raise
        stats["bisected"] = True
        mid = 0.5 * (values_prev + values_target)
        u_mid, st_mid = _advance_reduced(basis, weights, mesh, states, U_prev, values_prev,
                                         bc_template, mid, dt / 2.0, params, tol, max_iter,
                                         depth + 1, max_bisection, stats)
        return _advance_reduced(basis, weights, mesh, st_mid, u_mid, mid, bc_template,
                                values_target, dt / 2.0, params, tol, max_iter,
                                depth + 1, max_bisection, stats)


def run_rom(mesh: Mesh1D, params: MaterialParams, loading: LoadingProgram,
            basis: ManifoldBasis, weights: EcswWeights | None = None,
            tol: float = 1e-10, max_iter: int = 25, max_bisection: int = 5) -> RomSolution:
    """Time-step the hyperreduced model under the same loading as the FOM.

    ``weights=None`` selects every element with unit weight. Elements
    adjacent to Dirichlet boundaries are force-included. The reaction
    force is recomputed from the boundary element at the reconstructed
    converged state.
    """
    params.validate()
    loading.validate()
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if basis.n != mesh.n_dofs:
        raise InvalidInputError(
            f"basis has {basis.n} rows but the mesh carries {mesh.n_dofs} DOFs")
    if weights is None:
        weights = EcswWeights.all_elements(mesh.n_elements)
    dt = loading.t_end / loading.n_step
    bc_template = dirichlet_bc(mesh, 0.0, 0.0, loading.theta_left, loading.theta_right)
    weights = include_boundary_elements(weights, mesh, bc_template.dofs)

    sol = RomSolution()
    U = initial_solution(mesh, params)
    states = QpState.zeros(mesh.n_qp)
    values_prev = _bc_values(bc_template, 0.0, loading)
    boundary_eid = np.array([mesh.n_elements - 1])
    reaction_dof_local = 3  # u-row of the right node in the last element

    for j in range(1, loading.n_step + 1):
        u_bar = loading.u_end * j / loading.n_step
        target = _bc_values(bc_template, u_bar, loading)
        stats = {"solve": 0.0, "iterations": 0, "du": np.zeros(basis.r), "bisected": False}
        wall0 = time.perf_counter()
        try:
            U_next, states_next = _advance_reduced(
                basis, weights, mesh, states, U, values_prev, bc_template, target, dt,
                params, tol, max_iter, 0, max_bisection, stats)
        except (StepFailureError, ConstitutiveFailureError, ReducedSolverError):
            sol.failed = True
            sol.failure_step = j
            break
        wall = time.perf_counter() - wall0
        r_boundary, _ = elements_residual(mesh, states, U_next, U, params, dt, boundary_eid)
        U, states = U_next, states_next
        values_prev = target
        sol.solutions.append(U.copy())
        sol.reduced_increments.append(stats["du"])
        sol.iterations.append(stats["iterations"])
        sol.reaction_force.append(float(r_boundary[0, reaction_dof_local]))
        sol.u_prescribed.append(u_bar)
        sol.step_times_solve.append(stats["solve"])
        sol.step_times_wall.append(wall)
        if stats["bisected"]:
            sol.bisected_steps.append(j)
    return sol

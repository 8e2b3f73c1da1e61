"""Full-order 1D finite-element solver for the coupled damage-plasticity bar.

Three nodal fields per node (axial displacement u, nonlocal damage Dbar,
temperature theta), linear two-node elements with 2-point Gauss
quadrature, element tangents by forward finite differences of the
element residual, monolithic Newton with a banded LU solve, and backward
Euler for the transient thermal term. Element evaluation is vectorized
over arbitrary element subsets so the hyperreduced solver can reuse the
same kernels.

Local element DOF ordering is node-major: (u1, Dbar1, theta1, u2,
Dbar2, theta2), matching the global node-major layout.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .errors import (
    ConstitutiveFailureError,
    FormatError,
    InvalidInputError,
    StepFailureError,
)
from .material import MaterialParams, MaterialResponse, QpState, degradation, material_update
from .snapshots import FIELD_DAMAGE, FIELD_DISPLACEMENT, FIELD_TEMPERATURE, SnapshotSet

N_FIELDS = 3
GP_XI = np.array([-1.0, 1.0]) / np.sqrt(3.0)
GP_W = np.array([1.0, 1.0])
# Linear shape functions evaluated at the two Gauss points: N[g, a].
SHAPE_N = np.stack([(1.0 - GP_XI) / 2.0, (1.0 + GP_XI) / 2.0], axis=1)
BANDWIDTH = 5
FD_STEP = 1e-7

HISTORY_MAGIC = b"QMORHIS1"


@dataclass(frozen=True)
class Mesh1D:
    """Uniformly ordered 1D bar mesh with 3 DOFs per node."""

    length: float
    n_elements: int
    node_coords: np.ndarray
    defect_element: int | None = None
    defect_factor: float = 1.0

    @classmethod
    def uniform(cls, length: float, n_elements: int, defect_element: int | None = None,
                defect_factor: float = 1.0) -> "Mesh1D":
        if length <= 0 or n_elements < 1:
            raise InvalidInputError("mesh needs positive length and at least one element")
        if defect_element is not None and not (0 <= defect_element < n_elements):
            raise InvalidInputError(f"defect_element {defect_element} out of range")
        if not (0.0 < defect_factor <= 1.0):
            raise InvalidInputError("defect_factor must lie in (0, 1]")
        coords = np.linspace(0.0, length, n_elements + 1)
        return cls(length, n_elements, coords, defect_element, defect_factor)

    @property
    def n_nodes(self) -> int:
        return self.n_elements + 1

    @property
    def n_dofs(self) -> int:
        return N_FIELDS * self.n_nodes

    @property
    def n_qp(self) -> int:
        return 2 * self.n_elements

    def dof_u(self, node: int) -> int:
        return N_FIELDS * node

    def dof_damage(self, node: int) -> int:
        return N_FIELDS * node + 1

    def dof_theta(self, node: int) -> int:
        return N_FIELDS * node + 2

    @property
    def element_dofs(self) -> np.ndarray:
        left = np.arange(self.n_elements)
        nodes = np.stack([left, left + 1], axis=1)
        return (N_FIELDS * nodes[:, :, None] + np.arange(N_FIELDS)[None, None, :]).reshape(
            self.n_elements, 6
        )

    @property
    def element_lengths(self) -> np.ndarray:
        return np.diff(self.node_coords)

    @property
    def y0_scale(self) -> np.ndarray:
        scale = np.ones(self.n_elements)
        if self.defect_element is not None:
            scale[self.defect_element] = self.defect_factor
        return scale

    def field_tags(self) -> np.ndarray:
        return np.tile(
            np.array([FIELD_DISPLACEMENT, FIELD_DAMAGE, FIELD_TEMPERATURE], dtype=np.uint8),
            self.n_nodes,
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.node_coords, dtype="<f8").tobytes())
        h.update(repr((self.n_elements, self.defect_element, self.defect_factor)).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class LoadingProgram:
    """Linear end-displacement ramp with optional fixed end temperatures."""

    u_end: float
    n_step: int
    t_end: float = 1.0
    theta_left: float | None = None
    theta_right: float | None = None

    def validate(self) -> None:
        if self.n_step < 1:
            raise InvalidInputError("n_step must be at least 1")
        if self.t_end <= 0:
            raise InvalidInputError("t_end must be positive")


@dataclass(frozen=True)
class BoundaryConditions:
    """Dirichlet data: global DOF indices and prescribed values."""

    dofs: np.ndarray
    values: np.ndarray

    def free_mask(self, n_dofs: int) -> np.ndarray:
        mask = np.ones(n_dofs, dtype=bool)
        mask[self.dofs] = False
        return mask

    def with_values(self, values: np.ndarray) -> "BoundaryConditions":
        return BoundaryConditions(self.dofs, np.asarray(values, dtype=float))


def dirichlet_bc(mesh: Mesh1D, u_left: float, u_right: float,
                 theta_left: float | None, theta_right: float | None) -> BoundaryConditions:
    dofs = [mesh.dof_u(0), mesh.dof_u(mesh.n_nodes - 1)]
    values = [u_left, u_right]
    if theta_left is not None:
        dofs.append(mesh.dof_theta(0))
        values.append(theta_left)
    if theta_right is not None:
        dofs.append(mesh.dof_theta(mesh.n_nodes - 1))
        values.append(theta_right)
    return BoundaryConditions(np.asarray(dofs, dtype=int), np.asarray(values, dtype=float))


def initial_solution(mesh: Mesh1D, params: MaterialParams) -> np.ndarray:
    u0 = np.zeros(mesh.n_dofs)
    u0[2::N_FIELDS] = params.theta0
    return u0


# ---------------------------------------------------------------------------
# Element kernels (vectorized over an element batch)
# ---------------------------------------------------------------------------


def _element_kernel(u, d, t, t_prev, lengths, states_gp, params, dt, y0_scale,
                    branches=None):
    """Residual (m, 6) for a batch of elements plus per-gp responses.

    ``u, d, t, t_prev`` are (m, 2) nodal arrays, ``states_gp`` a pair of
    QpState batches (one per Gauss point), evaluated against the old
    committed internal variables. ``branches`` freezes the constitutive
    branch per Gauss point (used by tangent finite differences).
    """
    m = u.shape[0]
    jac = lengths / 2.0
    inv_l = 1.0 / lengths
    r = np.zeros((m, 6))
    responses = []
    eps = (u[:, 1] - u[:, 0]) * inv_l
    dbar_prime = (d[:, 1] - d[:, 0]) * inv_l
    theta_prime = (t[:, 1] - t[:, 0]) * inv_l
    for g in range(2):
        n_g = SHAPE_N[g]
        dbar_gp = n_g[0] * d[:, 0] + n_g[1] * d[:, 1]
        theta_gp = n_g[0] * t[:, 0] + n_g[1] * t[:, 1]
        theta_prev_gp = n_g[0] * t_prev[:, 0] + n_g[1] * t_prev[:, 1]
        resp = material_update(states_gp[g], eps, theta_gp, dbar_gp, params, dt, y0_scale,
                               branch=None if branches is None else branches[g])
        responses.append(resp)
        theta_dot = (theta_gp - theta_prev_gp) / dt
        f_d = degradation(resp.state.D)
        conductivity = f_d * params.K0 + (1.0 - f_d) * params.Kc
        w_jac = GP_W[g] * jac
        for a in range(2):
            b_a = (-1.0 if a == 0 else 1.0) * inv_l
            # Mechanical row: integral of sigma * dN_a/dx.
            r[:, 3 * a + 0] += w_jac * resp.sigma * b_a
            # Damage row, sign as printed in the weak form: penalty minus gradient.
            r[:, 3 * a + 1] += w_jac * (
                params.H_pen * (resp.state.D - dbar_gp) * n_g[a]
                - params.A_grad * dbar_prime * b_a
            )
            # Thermal row: capacity + conduction - dissipative heating.
            r[:, 3 * a + 2] += w_jac * (
                params.c_heat * theta_dot * n_g[a]
                + conductivity * theta_prime * b_a
                - resp.r_diss * n_g[a]
            )
    return r, responses


def _gather(mesh: Mesh1D, vec: np.ndarray, eids: np.ndarray):
    nodes = np.stack([eids, eids + 1], axis=1)
    base = N_FIELDS * nodes
    return vec[base], vec[base + 1], vec[base + 2]


def _states_at(states: QpState, eids: np.ndarray):
    return (states.take(2 * eids), states.take(2 * eids + 1))


def elements_residual(mesh: Mesh1D, states: QpState, U, U_prev, params: MaterialParams,
                      dt: float, eids: np.ndarray | None = None):
    """Residuals of a batch of elements against the committed state."""
    if eids is None:
        eids = np.arange(mesh.n_elements)
    u, d, t = _gather(mesh, np.asarray(U, dtype=float), eids)
    _, _, t_prev = _gather(mesh, np.asarray(U_prev, dtype=float), eids)
    return _element_kernel(
        u, d, t, t_prev, mesh.element_lengths[eids], _states_at(states, eids),
        params, dt, mesh.y0_scale[eids],
    )


def elements_tangent(mesh: Mesh1D, states: QpState, U, U_prev, params: MaterialParams,
                     dt: float, eids: np.ndarray | None = None, base_responses=None):
    """Forward-difference element tangents (m, 6, 6); column j perturbs DOF j.

    Perturbed evaluations keep the constitutive branch of the base state
    frozen so the columns are one-sided consistent derivatives even when
    a point sits on an activation boundary.
    """
    if eids is None:
        eids = np.arange(mesh.n_elements)
    u, d, t = _gather(mesh, np.asarray(U, dtype=float), eids)
    _, _, t_prev = _gather(mesh, np.asarray(U_prev, dtype=float), eids)
    lengths = mesh.element_lengths[eids]
    states_gp = _states_at(states, eids)
    y0 = mesh.y0_scale[eids]
    if base_responses is None:
        base, base_responses = _element_kernel(u, d, t, t_prev, lengths, states_gp,
                                               params, dt, y0)
    else:
        base = base_responses[0]
        base_responses = base_responses[1]
    branches = [resp.branch for resp in base_responses]
    m = len(eids)
    k = np.empty((m, 6, 6))
    nodal = (u, d, t)
    for j in range(6):
        node, fld = divmod(j, 3)
        values = nodal[fld]
        h = FD_STEP * np.maximum(1.0, np.abs(values[:, node]))
        pert = values.copy()
        pert[:, node] += h
        args = [u, d, t]
        args[fld] = pert
        r_pert, _ = _element_kernel(args[0], args[1], args[2], t_prev, lengths, states_gp,
                                    params, dt, y0, branches=branches)
        k[:, :, j] = (r_pert - base) / h[:, None]
    return k


def element_residual(nodal_u, nodal_dbar, nodal_theta, prev_theta, qps: QpState,
                     length: float, params: MaterialParams, dt: float, y0_scale: float = 1.0):
    """Residual vector (6,) of a single element."""
    u = np.asarray(nodal_u, dtype=float).reshape(1, 2)
    d = np.asarray(nodal_dbar, dtype=float).reshape(1, 2)
    t = np.asarray(nodal_theta, dtype=float).reshape(1, 2)
    tp = np.asarray(prev_theta, dtype=float).reshape(1, 2)
    states_gp = (qps.take(slice(0, 1)), qps.take(slice(1, 2)))
    r, responses = _element_kernel(u, d, t, tp, np.array([length]), states_gp, params, dt,
                                   np.array([y0_scale]))
    return r[0], responses


def element_tangent(nodal_u, nodal_dbar, nodal_theta, prev_theta, qps: QpState,
                    length: float, params: MaterialParams, dt: float, y0_scale: float = 1.0):
    """Forward-difference tangent (6, 6) of a single element."""
    nodal = [
        np.asarray(nodal_u, dtype=float).reshape(1, 2),
        np.asarray(nodal_dbar, dtype=float).reshape(1, 2),
        np.asarray(nodal_theta, dtype=float).reshape(1, 2),
    ]
    t_prev = np.asarray(prev_theta, dtype=float).reshape(1, 2)
    lengths = np.array([length])
    states_gp = (qps.take(slice(0, 1)), qps.take(slice(1, 2)))
    y0 = np.array([y0_scale])
    base, responses = _element_kernel(nodal[0], nodal[1], nodal[2], t_prev, lengths,
                                      states_gp, params, dt, y0)
    branches = [resp.branch for resp in responses]
    k = np.empty((6, 6))
    for j in range(6):
        node, fld = divmod(j, 3)
        h = FD_STEP * max(1.0, abs(nodal[fld][0, node]))
        pert = [arr.copy() for arr in nodal]
        pert[fld][0, node] += h
        r_pert, _ = _element_kernel(pert[0], pert[1], pert[2], t_prev, lengths, states_gp,
                                    params, dt, y0, branches=branches)
        k[:, j] = (r_pert[0] - base[0]) / h
    return k


# ---------------------------------------------------------------------------
# Global assembly and Newton stepping
# ---------------------------------------------------------------------------


@dataclass
class AssembledSystem:
    raw_residual: np.ndarray        # before Dirichlet row replacement
    residual: np.ndarray
    band: np.ndarray                # LAPACK band storage, (2*BANDWIDTH+1, n)
    responses: list[MaterialResponse]
    force_scale: float = 1.0        # norm of summed |element contributions|


def assemble_system(mesh: Mesh1D, states: QpState, U, U_prev, params: MaterialParams,
                    dt: float, bc: BoundaryConditions) -> AssembledSystem:
    """Assemble residual and banded tangent with Dirichlet rows replaced."""
    eids = np.arange(mesh.n_elements)
    r_e, responses = elements_residual(mesh, states, U, U_prev, params, dt, eids)
    k_e = elements_tangent(mesh, states, U, U_prev, params, dt, eids,
                           base_responses=(r_e, responses))
    edofs = mesh.element_dofs
    n = mesh.n_dofs

    raw = np.zeros(n)
    np.add.at(raw, edofs.ravel(), r_e.ravel())
    raw_abs = np.zeros(n)
    np.add.at(raw_abs, edofs.ravel(), np.abs(r_e).ravel())
    force_scale = float(np.linalg.norm(raw_abs[bc.free_mask(n)]))

    band = np.zeros((2 * BANDWIDTH + 1, n))
    rows = np.repeat(edofs[:, :, None], 6, axis=2)
    cols = np.repeat(edofs[:, None, :], 6, axis=1)
    np.add.at(band, (BANDWIDTH + rows.ravel() - cols.ravel(), cols.ravel()), k_e.ravel())

    residual = raw.copy()
    for i, val in zip(bc.dofs, bc.values):
        js = np.arange(max(0, i - BANDWIDTH), min(n, i + BANDWIDTH + 1))
        band[BANDWIDTH + i - js, js] = 0.0
        band[BANDWIDTH, i] = 1.0
        residual[i] = U[i] - val
    return AssembledSystem(raw, residual, band, responses, force_scale)


def banded_to_dense(band: np.ndarray, n: int) -> np.ndarray:
    dense = np.zeros((n, n))
    for i in range(n):
        js = np.arange(max(0, i - BANDWIDTH), min(n, i + BANDWIDTH + 1))
        dense[i, js] = band[BANDWIDTH + i - js, js]
    return dense


def assemble_global(mesh: Mesh1D, states: QpState, U, U_prev, params: MaterialParams,
                    dt: float, bc: BoundaryConditions | None = None):
    """Dense (R, K) assembly; Dirichlet handling applied when bc is given."""
    if bc is None:
        bc = BoundaryConditions(np.zeros(0, dtype=int), np.zeros(0))
    asm = assemble_system(mesh, states, U, U_prev, params, dt, bc)
    return asm.residual, banded_to_dense(asm.band, mesh.n_dofs)


def _commit(states: QpState, responses: list[MaterialResponse],
            eids: np.ndarray | None = None) -> QpState:
    new = states.copy()
    if eids is None:
        idx0 = np.arange(0, new.size, 2)
    else:
        idx0 = 2 * eids
    for g, resp in enumerate(responses):
        idx = idx0 + g
        new.eps_p[idx] = resp.state.eps_p
        new.xi_p[idx] = resp.state.xi_p
        new.D[idx] = resp.state.D
        new.xi_d[idx] = resp.state.xi_d
    return new


@dataclass
class StepResult:
    U: np.ndarray
    states: QpState
    iterations: int
    solve_time: float
    raw_residual: np.ndarray
    min_dissipation: float


def _free_residual_norm(mesh, states, U, U_prev, params, dt, bc, free):
    """Residual-only pass for line-search probes."""
    r_e, _ = elements_residual(mesh, states, U, U_prev, params, dt)
    raw = np.zeros(mesh.n_dofs)
    np.add.at(raw, mesh.element_dofs.ravel(), r_e.ravel())
    return float(np.linalg.norm(raw[free]))


MAX_LINE_SEARCH = 8


def solve_timestep(mesh: Mesh1D, states: QpState, U_prev, bc: BoundaryConditions,
                   params: MaterialParams, dt: float, tol: float = 1e-10,
                   max_iter: int = 25, U_guess=None) -> StepResult:
    """One monolithic Newton solve; internal variables commit on convergence.

    Without a guess, the first iteration linearizes at the previous
    equilibrated state and drives the Dirichlet increment through the
    replaced rows, so the load step is distributed by the consistent
    tangent instead of being dumped into the boundary element. A secant
    guess (previous increment extrapolated) starts closer and keeps the
    constitutive active set stable. ``iterations`` counts linear solves;
    convergence requires the free residual norm to fall below
    tol * max(1, residual after the predictor) with prescribed rows
    satisfied.
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if U_guess is None:
        U = np.asarray(U_prev, dtype=float).copy()
    else:
        U = np.asarray(U_guess, dtype=float).copy()
        U[bc.dofs] = bc.values
    free = bc.free_mask(mesh.n_dofs)
    bc_scale = max(1.0, float(np.abs(bc.values).max(initial=0.0)))
    solve_time = 0.0
    scale = None
    rnorm = np.inf
    best_overall = np.inf
    no_improve = 0
    for it in range(max_iter + 1):
        asm = assemble_system(mesh, states, U, U_prev, params, dt, bc)
        rnorm = float(np.linalg.norm(asm.residual[free]))
        bc_gap = float(np.abs(asm.residual[bc.dofs]).max(initial=0.0))
        if it >= 1 and scale is None:
            # The unsigned force scale keeps the test relative even when a
            # bisected increment starts with a tiny imbalance.
            scale = max(1.0, rnorm, asm.force_scale)
        if scale is not None and rnorm <= tol * scale and bc_gap <= tol * bc_scale:
            committed = _commit(states, asm.responses)
            min_diss = float(min(resp.r_diss.min() for resp in asm.responses))
            return StepResult(U, committed, it, solve_time, asm.raw_residual, min_diss)
        if it == max_iter:
            break
        t0 = time.perf_counter()
        try:
            du = la.solve_banded((BANDWIDTH, BANDWIDTH), asm.band, -asm.residual,
                                 check_finite=False)
        except (la.LinAlgError, ValueError) as exc:
            raise StepFailureError(f"banded solve failed: {exc}", residual_norm=rnorm) from exc
        solve_time += time.perf_counter() - t0
        if not np.all(np.isfinite(du)):
            raise StepFailureError("non-finite Newton update", residual_norm=rnorm)
        if it == 0:
            # Dirichlet predictor: take the full tangent-distributed step.
            U = U + du
            U[bc.dofs] = bc.values
            continue
        # Backtracking on the free residual; prescribed rows stay exact.
        # Acceptance is nonmonotone: the best trial is taken even uphill so
        # the iterate can cross constitutive activation kinks, but a run of
        # iterations without net progress fails fast into step bisection.
        alpha = 1.0
        best_u, best_rn = None, np.inf
        for _ in range(MAX_LINE_SEARCH):
            trial = U + alpha * du
            trial[bc.dofs] = bc.values
            try:
                rn_trial = _free_residual_norm(mesh, states, trial, U_prev, params, dt, bc,
                                               free)
            except ConstitutiveFailureError:
                rn_trial = np.inf
            if rn_trial < best_rn:
                best_u, best_rn = trial, rn_trial
            if rn_trial <= (1.0 - 1e-4 * alpha) * rnorm:
                break
            alpha *= 0.5
        if best_u is None:
            raise StepFailureError("every line-search probe failed constitutively",
                                   residual_norm=rnorm)
        if best_rn < 0.95 * best_overall:
            best_overall = best_rn
            no_improve = 0
        else:
            no_improve += 1
            if no_improve >= 6:
                raise StepFailureError(
                    f"Newton made no progress near residual {best_rn:.3e}",
                    residual_norm=best_rn)
        U = best_u
    raise StepFailureError(
        f"Newton did not converge within {max_iter} iterations (residual {rnorm:.3e})",
        residual_norm=rnorm,
    )


# ---------------------------------------------------------------------------
# Time stepping driver
# ---------------------------------------------------------------------------


@dataclass
class FomHistory:
    """Converged per-step record of a full-order run."""

    solutions: list[np.ndarray] = field(default_factory=list)
    qp_states: list[QpState] = field(default_factory=list)
    reaction_force: list[float] = field(default_factory=list)
    u_prescribed: list[float] = field(default_factory=list)
    step_times_solve: list[float] = field(default_factory=list)
    step_times_wall: list[float] = field(default_factory=list)
    min_dissipation: list[float] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    bisected_steps: list[int] = field(default_factory=list)
    initial_solution: np.ndarray | None = None
    initial_state: QpState | None = None
    dt: float = 0.0
    failed: bool = False
    failure_step: int | None = None

    @property
    def n_step(self) -> int:
        return len(self.solutions)

    @property
    def first_plastic_step(self) -> int:
        for j, st in enumerate(self.qp_states, start=1):
            if st.xi_p.max(initial=0.0) > 0.0:
                return j
        return 0

    @property
    def peak_force_step(self) -> int:
        if not self.reaction_force:
            return 0
        return int(np.argmax(np.abs(np.asarray(self.reaction_force)))) + 1


def _advance(mesh, params, states, U_prev, values_prev, bc_template, values_target, dt,
             tol, max_iter, depth, max_bisection, stats, delta_guess=None):
    bc = bc_template.with_values(values_target)
    try:
        try:
            guess = None if delta_guess is None else U_prev + delta_guess
            result = solve_timestep(mesh, states, U_prev, bc, params, dt, tol, max_iter,
                                    U_guess=guess)
        except (StepFailureError, ConstitutiveFailureError):
            if delta_guess is None:
                raise
            # Secant start failed; retry from the tangent predictor.
            result = solve_timestep(mesh, states, U_prev, bc, params, dt, tol, max_iter)
        stats["solve"] += result.solve_time
        stats["iterations"] += result.iterations
        stats["min_diss"] = min(stats["min_diss"], result.min_dissipation)
        return result
    except (StepFailureError, ConstitutiveFailureError):
        if depth >= max_bisection:
            raise
        stats["bisected"] = True
        mid = 0.5 * (values_prev + values_target)
        half_guess = None if delta_guess is None else 0.5 * delta_guess
        first = _advance(mesh, params, states, U_prev, values_prev, bc_template, mid,
                         dt / 2.0, tol, max_iter, depth + 1, max_bisection, stats, half_guess)
        return _advance(mesh, params, first.states, first.U, mid, bc_template,
                        values_target, dt / 2.0, tol, max_iter, depth + 1, max_bisection,
                        stats, first.U - U_prev)


def run_fom(mesh: Mesh1D, params: MaterialParams, loading: LoadingProgram,
            tol: float = 1e-10, max_iter: int = 25, max_bisection: int = 5):
    """Run the displacement-controlled bar and collect snapshots.

    Returns (FomHistory, SnapshotSet). On an unrecoverable step failure
    the partial history is returned with ``failed`` set.
    """
    params.validate()
    loading.validate()
    dt = loading.t_end / loading.n_step
    bc_template = dirichlet_bc(mesh, 0.0, 0.0, loading.theta_left, loading.theta_right)

    history = FomHistory(dt=dt)
    U = initial_solution(mesh, params)
    states = QpState.zeros(mesh.n_qp)
    history.initial_solution = U.copy()
    history.initial_state = states.copy()
    values_prev = _bc_values(bc_template, 0.0, loading)
    reaction_dof = mesh.dof_u(mesh.n_nodes - 1)
    delta_guess = None

    for j in range(1, loading.n_step + 1):
        u_bar = loading.u_end * j / loading.n_step
        target = _bc_values(bc_template, u_bar, loading)
        stats = {"solve": 0.0, "iterations": 0, "min_diss": np.inf, "bisected": False}
        wall0 = time.perf_counter()
        try:
            result = _advance(mesh, params, states, U, values_prev, bc_template, target, dt,
                              tol, max_iter, 0, max_bisection, stats, delta_guess)
        except (StepFailureError, ConstitutiveFailureError):
            history.failed = True
            history.failure_step = j
            break
        wall = time.perf_counter() - wall0
        delta_guess = result.U - U
        U, states = result.U, result.states
        values_prev = target
        history.solutions.append(U.copy())
        history.qp_states.append(states.copy())
        history.reaction_force.append(float(result.raw_residual[reaction_dof]))
        history.u_prescribed.append(u_bar)
        history.step_times_solve.append(stats["solve"])
        history.step_times_wall.append(wall)
        history.min_dissipation.append(float(stats["min_diss"]))
        history.iterations.append(stats["iterations"])
        if stats["bisected"]:
            history.bisected_steps.append(j)

    snaps = snapshots_from_history(mesh, params, history)
    return history, snaps


def _bc_values(bc_template: BoundaryConditions, u_bar: float, loading: LoadingProgram):
    values = [0.0, u_bar]
    if loading.theta_left is not None:
        values.append(loading.theta_left)
    if loading.theta_right is not None:
        values.append(loading.theta_right)
    return np.asarray(values, dtype=float)


def snapshots_from_history(mesh: Mesh1D, params: MaterialParams,
                           history: FomHistory) -> SnapshotSet:
    if not history.solutions:
        raise InvalidInputError("history holds no accepted steps")
    matrix = np.column_stack(history.solutions)
    meta = {
        "mesh_hash": mesh.content_hash(),
        "param_hash": hashlib.sha256(repr(params).encode()).hexdigest(),
        "n_step": history.n_step,
    }
    return SnapshotSet(matrix=matrix, field_tags=mesh.field_tags(), meta=meta)


def check_dissipation(history: FomHistory) -> float:
    """Minimum dissipation rate over all recorded steps and points."""
    if not history.min_dissipation:
        raise InvalidInputError("history holds no accepted steps")
    return float(min(history.min_dissipation))


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------


def write_force_disp(path, history: FomHistory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,u_prescribed,reaction\n")
        for j in range(history.n_step):
            fh.write(f"{j + 1},{history.u_prescribed[j]:.17g},{history.reaction_force[j]:.17g}\n")


def write_timings(path, step_times_solve, step_times_wall) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,t_solve_s,t_wall_s\n")
        for j, (ts, tw) in enumerate(zip(step_times_solve, step_times_wall), start=1):
            fh.write(f"{j},{ts:.9e},{tw:.9e}\n")


def read_timings(path):
    solve, wall = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("step,"):
            raise FormatError(f"{path} is not a timings file")
        for line in fh:
            parts = line.strip().split(",")
            solve.append(float(parts[1]))
            wall.append(float(parts[2]))
    return np.asarray(solve), np.asarray(wall)


def read_force_disp(path):
    u, f = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("step,"):
            raise FormatError(f"{path} is not a force-displacement file")
        for line in fh:
            parts = line.strip().split(",")
            u.append(float(parts[1]))
            f.append(float(parts[2]))
    return np.asarray(u), np.asarray(f)


def write_history(path, history: FomHistory) -> None:
    """Internal-variable history: magic, counts, then per-step state arrays."""
    n_step = history.n_step
    n_qp = history.qp_states[0].size if n_step else 0
    with open(path, "wb") as fh:
        fh.write(HISTORY_MAGIC)
        fh.write(np.asarray([n_step, n_qp], dtype="<u8").tobytes())
        for st in history.qp_states:
            for arr in (st.eps_p, st.xi_p, st.D, st.xi_d):
                fh.write(np.asarray(arr, dtype="<f8").tobytes())


def read_history(path) -> list[QpState]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != HISTORY_MAGIC:
        raise FormatError("bad history magic", offset=0)
    off = 8
    if len(blob) < off + 16:
        raise FormatError("truncated history header", offset=len(blob))
    n_step, n_qp = np.frombuffer(blob, dtype="<u8", count=2, offset=off)
    off += 16
    states = []
    for _ in range(int(n_step)):
        arrays = []
        for _ in range(4):
            end = off + 8 * int(n_qp)
            if len(blob) < end:
                raise FormatError("truncated history payload", offset=len(blob))
            arrays.append(np.frombuffer(blob, dtype="<f8", count=int(n_qp), offset=off).copy())
            off += 8 * int(n_qp)
        states.append(QpState(*arrays))
    return states

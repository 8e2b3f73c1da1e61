"""Two-surface gradient-damage-plasticity material point in 1D small strain.

The model couples plasticity (von Mises analog with kinematic plus
nonlinear isotropic hardening and thermal softening of the yield
resistance) to scalar damage driven by the stored elastoplastic energy,
with a micromorphic penalty tying local damage D to the nodal nonlocal
field. Stresses are degraded by (1-D)^2. All state arithmetic is
vectorized: a call may carry a single quadrature point or every point of
the mesh at once.

The two loading surfaces decouple sequentially at a point: the effective
yield check does not see D, so the plastic multiplier is solved first
and the damage multiplier second, which is the exact active-set solution
of the coupled system.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConstitutiveFailureError, InvalidInputError

LOCAL_NEWTON_CAP = 50
_EPS_TOL = np.finfo(float).eps


@dataclass(frozen=True)
class MaterialParams:
    """Material and regularization constants (MPa, mm, s, K units)."""

    E: float = 150000.0          # elastic modulus [MPa]
    sigma_y0: float = 100.0      # initial yield stress [MPa]
    a_kin: float = 62.5          # kinematic hardening modulus [MPa]
    P_iso: float = 0.0           # linear isotropic hardening [MPa]
    e_p: float = 125.0           # nonlinear isotropic hardening amplitude [MPa]
    f_p: float = 5.0             # nonlinear isotropic hardening rate [-]
    Y0: float = 2.5              # damage threshold [MPa]
    e_d: float = 5.0             # damage hardening amplitude [MPa]
    f_d_hard: float = 100.0      # damage hardening rate [-]
    A_grad: float = 75.0         # gradient parameter [MPa mm^2]
    H_pen: float = 1.0e6         # micromorphic penalty [MPa]
    c_heat: float = 3.59         # volumetric heat capacity [mJ/(mm^3 K)]
    alpha: float = 1.1e-5        # thermal expansion [1/K]
    K0: float = 50.2             # heat conductivity, intact [mW/(mm K)]
    Kc: float = 0.502            # heat conductivity, fully broken [mW/(mm K)]
    theta0: float = 273.15       # reference temperature [K]
    omega: float = 0.002         # thermal softening [1/K]
    D_max: float = 0.999         # damage cap [-]

    def validate(self) -> None:
        if not (self.E > 0 and self.sigma_y0 > 0):
            raise InvalidInputError("E and sigma_y0 must be positive")
        if self.Y0 < 0 or self.A_grad < 0 or self.Kc < 0:
            raise InvalidInputError("Y0, A_grad and Kc must be non-negative")
        if not (self.H_pen > 0 and self.c_heat > 0):
            raise InvalidInputError("H_pen and c_heat must be positive")
        if not (0.0 < self.D_max < 1.0):
            raise InvalidInputError("D_max must lie in (0, 1)")


@dataclass
class QpState:
    """Internal variables per quadrature point (arrays of equal shape)."""

    eps_p: np.ndarray   # plastic strain
    xi_p: np.ndarray    # accumulated plastic strain
    D: np.ndarray       # local damage
    xi_d: np.ndarray    # damage hardening variable

    @classmethod
    def zeros(cls, n: int) -> "QpState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self) -> "QpState":
        return QpState(self.eps_p.copy(), self.xi_p.copy(), self.D.copy(), self.xi_d.copy())

    def take(self, idx) -> "QpState":
        return QpState(self.eps_p[idx], self.xi_p[idx], self.D[idx], self.xi_d[idx])

    @property
    def size(self) -> int:
        return self.eps_p.size


@dataclass(frozen=True)
class ReturnBranch:
    """Active return-mapping branch of a converged evaluation.

    Re-running the update with a frozen branch evaluates the smooth
    extension of that branch (multipliers may go negative), which is what
    consistent one-sided finite-difference tangents need near activation
    boundaries.
    """

    s: np.ndarray
    plastic: np.ndarray
    damaging: np.ndarray
    clamped: np.ndarray


@dataclass
class MaterialResponse:
    """Updated state plus stress, damage force, heating and tangents."""

    sigma: np.ndarray        # degraded stress
    Y: np.ndarray            # damage driving force
    state: QpState           # committed-candidate internal variables
    r_diss: np.ndarray       # dissipative heating rate (>= 0 up to roundoff)
    dsig_deps: np.ndarray    # algorithmic tangents
    dsig_ddbar: np.ndarray
    dsig_dtheta: np.ndarray
    dD_ddbar: np.ndarray
    clamped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    branch: ReturnBranch | None = None

    @property
    def tangents(self):
        return (self.dsig_deps, self.dsig_ddbar, self.dsig_dtheta, self.dD_ddbar)


def degradation(d):
    """Quadratic stress degradation (1-D)^2."""
    return (1.0 - d) ** 2


def iso_hardening(xi_p, params: MaterialParams):
    """Effective isotropic yield hardening e_p(1-exp(-f_p xi)) + P xi."""
    return params.e_p * (-np.expm1(-params.f_p * xi_p)) + params.P_iso * xi_p


def iso_hardening_slope(xi_p, params: MaterialParams):
    return params.e_p * params.f_p * np.exp(-params.f_p * xi_p) + params.P_iso


def damage_hardening(xi_d, params: MaterialParams):
    """Damage hardening resistance e_d(1-exp(-f_d xi_d))."""
    return params.e_d * (-np.expm1(-params.f_d_hard * xi_d))


def damage_hardening_slope(xi_d, params: MaterialParams):
    return params.e_d * params.f_d_hard * np.exp(-params.f_d_hard * xi_d)


def plastic_energy(eps_p, xi_p, params: MaterialParams):
    """Undegraded stored plastic energy (kinematic + isotropic parts)."""
    iso = params.e_p * (xi_p + np.expm1(-params.f_p * xi_p) / params.f_p)
    return 0.5 * params.a_kin * eps_p**2 + iso + 0.5 * params.P_iso * xi_p**2


def _masked_newton(residual, derivative, active, tol, what, clamp: bool = True):
    """Vectorized scalar Newton for the masked points; returns multipliers.

    ``clamp=False`` admits negative multipliers, used when a frozen
    branch is evaluated off its own activation region.
    """
    lam = np.zeros(active.shape)
    todo = active.copy()
    for _ in range(LOCAL_NEWTON_CAP):
        if not todo.any():
            return lam
        res = residual(lam)
        done = np.abs(res) <= tol
        todo &= ~done
        if not todo.any():
            return lam
        step = -res / derivative(lam)
        update = lam + step
        if clamp:
            update = np.maximum(update, 0.0)
        lam = np.where(todo, update, lam)
    bad = np.flatnonzero(todo)
    raise ConstitutiveFailureError(
        f"{what} return mapping stalled after {LOCAL_NEWTON_CAP} iterations",
        diagnostics={"points": bad[:16].tolist(), "residual": float(np.abs(residual(lam))[todo].max())},
    )


def material_update(
    state: QpState,
    eps,
    theta,
    dbar,
    params: MaterialParams,
    dt: float,
    y0_scale=1.0,
    branch: ReturnBranch | None = None,
) -> MaterialResponse:
    """Incremental constitutive update at one or many quadrature points.

    ``eps``, ``theta``, ``dbar`` and ``y0_scale`` broadcast against the
    state arrays. ``dt`` converts the dissipation increment into a
    heating rate. Damage reaching the cap D_max is clamped and flagged;
    the state argument is never mutated. Passing ``branch`` re-evaluates
    the smooth extension of a previously returned branch, which tangent
    finite differences rely on for one-sided consistency.
    """
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    eps = np.asarray(eps, dtype=float)
    theta = np.asarray(theta, dtype=float)
    dbar = np.asarray(dbar, dtype=float)
    shape = np.broadcast_shapes(state.eps_p.shape, eps.shape, theta.shape, dbar.shape)
    eps = np.broadcast_to(eps, shape)
    theta = np.broadcast_to(theta, shape)
    dbar = np.broadcast_to(dbar, shape)
    y0_eff = np.broadcast_to(np.asarray(y0_scale, dtype=float), shape) * params.Y0

    dtheta = theta - params.theta0
    f_theta = 1.0 - params.omega * dtheta
    tol_p = 1e-10 * params.sigma_y0
    tol_d = 1e-10 * max(params.Y0, 1.0)
    frozen = branch is not None

    # Plastic predictor in effective (undegraded) stress space.
    eps_e_tr = eps - state.eps_p - params.alpha * dtheta
    z_tr = params.E * eps_e_tr - params.a_kin * state.eps_p
    if frozen:
        s = branch.s
        plastic = branch.plastic
    else:
        s = np.sign(z_tr)
        phi_p_tr = np.abs(z_tr) - f_theta * (params.sigma_y0 + iso_hardening(state.xi_p, params))
        plastic = phi_p_tr > tol_p

    hard_mod = params.E + params.a_kin

    def res_p(lam):
        return (
            s * z_tr
            - hard_mod * lam
            - f_theta * (params.sigma_y0 + iso_hardening(state.xi_p + lam, params))
        )

    def der_p(lam):
        return -hard_mod - f_theta * iso_hardening_slope(state.xi_p + lam, params)

    # Relative floor keeps the convergence test meaningful when probe
    # states carry stresses far above the physical scale.
    tol_p_eff = np.maximum(tol_p, 100.0 * _EPS_TOL * np.abs(z_tr))
    dlam_p = _masked_newton(res_p, der_p, plastic, tol_p_eff, "plastic", clamp=not frozen)

    eps_p = state.eps_p + s * dlam_p
    xi_p = state.xi_p + dlam_p
    eps_e = eps - eps_p - params.alpha * dtheta
    psi_ep = 0.5 * params.E * eps_e**2 + plastic_energy(eps_p, xi_p, params)

    # Damage predictor using the post-plastic stored energy.
    if frozen:
        damaging = branch.damaging
    else:
        phi_d_tr = (
            2.0 * (1.0 - state.D) * psi_ep
            - params.H_pen * (state.D - dbar)
            - y0_eff
            - damage_hardening(state.xi_d, params)
        )
        damaging = phi_d_tr > tol_d

    def res_d(lam):
        return (
            2.0 * (1.0 - state.D - lam) * psi_ep
            - params.H_pen * (state.D + lam - dbar)
            - y0_eff
            - damage_hardening(state.xi_d + lam, params)
        )

    def der_d(lam):
        return -2.0 * psi_ep - params.H_pen - damage_hardening_slope(state.xi_d + lam, params)

    tol_d_eff = np.maximum(
        tol_d,
        100.0 * _EPS_TOL * (2.0 * psi_ep + params.H_pen * np.abs(state.D - dbar) + y0_eff),
    )
    dlam_d = _masked_newton(res_d, der_d, damaging, tol_d_eff, "damage", clamp=not frozen)

    if frozen:
        clamped = branch.clamped
    else:
        clamped = state.D + dlam_d > params.D_max
    dlam_d = np.where(clamped, params.D_max - state.D, dlam_d)
    D = state.D + dlam_d
    xi_d = state.xi_d + dlam_d

    f_d = degradation(D)
    sigma = f_d * params.E * eps_e
    chi = f_d * params.a_kin * eps_p
    q_p = f_d * iso_hardening(xi_p, params)
    q_d = damage_hardening(xi_d, params)
    Y = 2.0 * (1.0 - D) * psi_ep - params.H_pen * (D - dbar)

    r_diss = ((sigma - chi) * s * dlam_p - q_p * dlam_p - q_d * dlam_d + Y * dlam_d) / dt

    # Algorithmic tangents via the implicit function theorem on the two
    # converged surfaces (clamped points are frozen).
    denom_p = hard_mod + f_theta * iso_hardening_slope(xi_p, params)
    dphi_p_deps = s * params.E
    dphi_p_dtheta = -s * params.E * params.alpha + params.omega * (
        params.sigma_y0 + iso_hardening(xi_p, params)
    )
    dlp_deps = np.where(plastic, dphi_p_deps / denom_p, 0.0)
    dlp_dtheta = np.where(plastic, dphi_p_dtheta / denom_p, 0.0)

    evolving = damaging & ~clamped
    denom_d = 2.0 * psi_ep + params.H_pen + damage_hardening_slope(xi_d, params)
    dpsi_dlp = params.E * eps_e * (-s) + params.a_kin * eps_p * s + iso_hardening(xi_p, params)
    dphi_d_deps = 2.0 * (1.0 - D) * (params.E * eps_e + dpsi_dlp * dlp_deps)
    dphi_d_dtheta = 2.0 * (1.0 - D) * (params.E * eps_e * (-params.alpha) + dpsi_dlp * dlp_dtheta)
    dld_deps = np.where(evolving, dphi_d_deps / denom_d, 0.0)
    dld_dtheta = np.where(evolving, dphi_d_dtheta / denom_d, 0.0)
    dld_ddbar = np.where(evolving, params.H_pen / denom_d, 0.0)

    deps_e_deps = 1.0 - s * dlp_deps
    deps_e_dtheta = -params.alpha - s * dlp_dtheta
    dfd = -2.0 * (1.0 - D) * params.E * eps_e
    dsig_deps = dfd * dld_deps + f_d * params.E * deps_e_deps
    dsig_dtheta = dfd * dld_dtheta + f_d * params.E * deps_e_dtheta
    dsig_ddbar = dfd * dld_ddbar

    return MaterialResponse(
        sigma=sigma,
        Y=Y,
        state=QpState(eps_p, xi_p, D, xi_d),
        r_diss=r_diss,
        dsig_deps=dsig_deps,
        dsig_ddbar=dsig_ddbar,
        dsig_dtheta=dsig_dtheta,
        dD_ddbar=dld_ddbar,
        clamped=clamped,
        branch=branch if frozen else ReturnBranch(s, plastic, damaging, clamped),
    )


def params_from_mapping(values: dict) -> MaterialParams:
    """Build MaterialParams from a mapping, rejecting unknown keys."""
    known = {f.name for f in fields(MaterialParams)}
    unknown = set(values) - known
    if unknown:
        raise InvalidInputError(f"unknown material parameters: {sorted(unknown)}")
    params = MaterialParams(**values)
    params.validate()
    return params

"""Quadratic-manifold reduced bases.

Per-field POD truncation yields a linear block and a nonlinear block
from one left singular factor; polynomial features of the reduced state
are weighted by a closed-form ridge-regularized coefficient matrix; the
global basis concatenates the zero-padded per-field blocks and places
the per-field coefficient matrices block-diagonally against the
matching feature blocks. Decoding is

    U ~ phi_lin @ u_red + phi_nonlin @ xi @ g(u_red)

with g stacking elementwise powers 2..p of the reduced state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError, RegularizationRequiredError, SingularMatrixError
from .numerics import randomized_range, solve_dense, thin_svd

BASIS_MAGIC = b"QMORBAS1"
BASIS_VERSION = 1
REDUNDANT_DIAG_TOL = 1e-10


@dataclass
class FieldBasis:
    """Linear/nonlinear projection blocks of one physical field.

    The columns of ``phi_lin`` and ``phi_nonlin`` are jointly orthonormal
    and vanish outside the field's rows.
    """

    phi_lin: np.ndarray        # (n, modes)
    phi_nonlin: np.ndarray     # (n, q)
    xi: np.ndarray             # (q, (p-1)*modes)
    singular_values: np.ndarray
    field: int
    gamma: float = 0.0
    redundant: bool = False    # multi-state merge produced near-dependent columns

    @property
    def modes(self) -> int:
        return self.phi_lin.shape[1]

    @property
    def q(self) -> int:
        return self.phi_nonlin.shape[1]


@dataclass
class ManifoldBasis:
    """Global multi-field basis with block-diagonal coefficient matrix."""

    u: FieldBasis
    damage: FieldBasis
    theta: FieldBasis
    p: int
    phi_lin: np.ndarray = None
    phi_nonlin: np.ndarray = None
    xi: np.ndarray = None

    @property
    def fields(self):
        return (self.u, self.damage, self.theta)

    @property
    def r(self) -> int:
        return self.phi_lin.shape[1]

    @property
    def n(self) -> int:
        return self.phi_lin.shape[0]

    @property
    def mode_counts(self):
        return (self.u.modes, self.damage.modes, self.theta.modes)


def poly_features(u_red, p: int) -> np.ndarray:
    """Stack elementwise powers 2..p of the reduced state (ascending)."""
    if p < 2:
        raise InvalidInputError(f"polynomial order must be >= 2, got {p}")
    u_red = np.asarray(u_red, dtype=float)
    return np.concatenate([u_red**j for j in range(2, p + 1)], axis=0)


def poly_features_jacobian(u_red, p: int) -> np.ndarray:
    """Derivative of poly_features: stacked blocks j * diag(u^(j-1))."""
    if p < 2:
        raise InvalidInputError(f"polynomial order must be >= 2, got {p}")
    u_red = np.asarray(u_red, dtype=float).reshape(-1)
    blocks = [j * np.diag(u_red ** (j - 1)) for j in range(2, p + 1)]
    return np.concatenate(blocks, axis=0)


def build_field_basis(field_snap, modes: int, q: int, field: int,
                      rows: np.ndarray | None = None) -> FieldBasis:
    """Truncate the field SVD into linear (first ``modes``) and nonlinear
    (next ``q``) left singular vectors.

    ``rows`` restricts the factorization to the field's own (free) rows;
    all other rows of the returned blocks are exactly zero. The xi block
    is left empty and is filled by :func:`compute_xi_field`.
    """
    field_snap = np.asarray(field_snap, dtype=float)
    n, n_step = field_snap.shape
    if rows is None:
        rows = np.arange(n)
    rows = np.asarray(rows, dtype=int)
    available = min(rows.size, n_step)
    if modes < 0 or q < 0 or modes + q > available:
        raise InvalidInputError(
            f"modes + q = {modes + q} exceeds available rank {available}"
        )
    sub = field_snap[rows]
    svd = thin_svd(sub) if available > 0 else None
    phi_lin = np.zeros((n, modes))
    phi_nonlin = np.zeros((n, q))
    if svd is not None:
        phi_lin[rows] = svd.left_vectors[:, :modes]
        phi_nonlin[rows] = svd.left_vectors[:, modes:modes + q]
        sv = svd.singular_values
    else:
        sv = np.zeros(0)
    return FieldBasis(
        phi_lin=phi_lin,
        phi_nonlin=phi_nonlin,
        xi=np.zeros((q, 0)),
        singular_values=sv,
        field=field,
    )


def xi_objective(basis: FieldBasis, field_snap, xi, gamma: float, p: int) -> float:
    """Regularized Frobenius objective whose minimizer is the xi block."""
    field_snap = np.asarray(field_snap, dtype=float)
    u_red = basis.phi_lin.T @ field_snap
    w = poly_features(u_red, p) if basis.modes else np.zeros((0, field_snap.shape[1]))
    resid = field_snap - basis.phi_lin @ u_red - basis.phi_nonlin @ (xi @ w)
    return 0.5 * float(np.sum(resid * resid)) + 0.5 * gamma * float(np.sum(xi * xi))


def compute_xi_field(basis: FieldBasis, field_snap, gamma: float, p: int) -> np.ndarray:
    """Closed-form ridge solution for the field coefficient matrix.

    Solves phi_nonlin^T (I - phi_lin phi_lin^T) U W^T = (W W^T + gamma I) xi
    with W the polynomial features of the linearly reduced snapshots.
    """
    if gamma < 0:
        raise InvalidInputError("gamma must be non-negative")
    field_snap = np.asarray(field_snap, dtype=float)
    n_feat = (p - 1) * basis.modes
    if basis.q == 0 or n_feat == 0:
        return np.zeros((basis.q, n_feat))
    u_red = basis.phi_lin.T @ field_snap
    w = poly_features(u_red, p)
    resid = field_snap - basis.phi_lin @ u_red
    rhs = (basis.phi_nonlin.T @ resid) @ w.T          # (q, n_feat)
    gram = w @ w.T + gamma * np.eye(n_feat)
    xi = np.empty((basis.q, n_feat))
    try:
        for i in range(basis.q):
            xi[i] = solve_dense(gram, rhs[i])
    except SingularMatrixError as exc:
        raise RegularizationRequiredError(
            "feature Gram matrix is singular; retry with gamma > 0"
        ) from exc
    return xi


def _feature_offsets(mode_counts, p: int):
    """Column placement of each field's power-j feature block in the
    global feature vector (powers are stacked power-major)."""
    r = sum(mode_counts)
    starts = np.concatenate([[0], np.cumsum(mode_counts)])[:3]
    slots = []
    for f, k_f in enumerate(mode_counts):
        cols = []
        for j in range(p - 1):
            cols.append((j * r + starts[f], j * r + starts[f] + k_f))
        slots.append(cols)
    return slots


def assemble_global_basis(u: FieldBasis, damage: FieldBasis, theta: FieldBasis,
                          p: int) -> ManifoldBasis:
    """Concatenate field blocks and scatter the per-field xi blocks."""
    fields = (u, damage, theta)
    n_rows = {f.phi_lin.shape[0] for f in fields}
    if len(n_rows) != 1:
        raise InvalidInputError("field bases disagree in DOF count")
    qs = {f.q for f in fields}
    if len(qs) != 1:
        raise InvalidInputError("the nonlinear mode count q must be shared across fields")
    n = n_rows.pop()
    q = qs.pop()
    mode_counts = tuple(f.modes for f in fields)
    r = sum(mode_counts)
    phi_lin = np.concatenate([f.phi_lin for f in fields], axis=1)
    phi_nonlin = np.concatenate([f.phi_nonlin for f in fields], axis=1)
    xi = np.zeros((3 * q, (p - 1) * r))
    slots = _feature_offsets(mode_counts, p)
    for f, fb in enumerate(fields):
        if fb.xi.shape != (q, (p - 1) * fb.modes):
            raise InvalidInputError(
                f"field {f} xi block has shape {fb.xi.shape}, expected "
                f"{(q, (p - 1) * fb.modes)}"
            )
        for j, (lo, hi) in enumerate(slots[f]):
            xi[f * q:(f + 1) * q, lo:hi] = fb.xi[:, j * fb.modes:(j + 1) * fb.modes]
    return ManifoldBasis(u=u, damage=damage, theta=theta, p=p,
                         phi_lin=phi_lin, phi_nonlin=phi_nonlin, xi=xi)


def decode(basis: ManifoldBasis, u_red) -> np.ndarray:
    u_red = np.asarray(u_red, dtype=float).reshape(-1)
    out = basis.phi_lin @ u_red
    if basis.phi_nonlin.shape[1]:
        out = out + basis.phi_nonlin @ (basis.xi @ poly_features(u_red, basis.p))
    return out


def encode_linear(basis: ManifoldBasis, U) -> np.ndarray:
    return basis.phi_lin.T @ np.asarray(U, dtype=float).reshape(-1)


def encode_nonlinear(basis: ManifoldBasis, U, tol: float = 1e-12, max_iter: int = 20):
    """Gauss-Newton projection onto the quadratic manifold.

    Starts from the linear encode and stops when the step or the
    projected gradient falls below tol. Returns (u_red, converged).
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    U = np.asarray(U, dtype=float).reshape(-1)
    u_red = encode_linear(basis, U)
    for _ in range(max_iter):
        resid = decode(basis, u_red) - U
        jac = basis.phi_lin.copy()
        if basis.phi_nonlin.shape[1]:
            jac = jac + basis.phi_nonlin @ (basis.xi @ poly_features_jacobian(u_red, basis.p))
        grad = jac.T @ resid
        if np.linalg.norm(grad) <= tol:
            return u_red, True
        step = solve_dense(jac.T @ jac, -grad)
        u_red = u_red + step
        if np.linalg.norm(step) <= tol:
            return u_red, True
    return u_red, False


def merge_multistate(state_matrices, linear_counts, nonlinear_counts, target_rank: int,
                     oversample: int, seed: int, field: int,
                     singular_values=None) -> FieldBasis:
    """Merge per-state left factors through a randomized range and QR.

    ``state_matrices`` are the (zero-padded) left singular factors of the
    elastic, hardening and softening snapshot blocks of one field. Each
    projected factor H_x = Q (Q^T S_x) is truncated at its linear count
    and the following nonlinear count; the concatenation is then
    re-orthonormalized by QR. Near-zero diagonal entries of the QR
    triangle flag redundant directions in the result.
    """
    if len(state_matrices) != 3 or len(linear_counts) != 3 or len(nonlinear_counts) != 3:
        raise InvalidInputError("exactly three states (elastic, hardening, softening) expected")
    mats = [np.asarray(s, dtype=float) for s in state_matrices]
    n = mats[0].shape[0]
    s_ehs = np.concatenate(mats, axis=1)
    rows = np.flatnonzero(np.any(s_ehs != 0.0, axis=1))
    if rows.size == 0:
        raise InvalidInputError("state matrices are identically zero")
    q_range = randomized_range(s_ehs[rows], target_rank, oversample, seed)

    lin_parts, non_parts = [], []
    for mat, k_x, q_x in zip(mats, linear_counts, nonlinear_counts):
        if k_x + q_x > mat.shape[1]:
            raise InvalidInputError(
                f"state provides {mat.shape[1]} columns but {k_x}+{q_x} were requested"
            )
        h_x = q_range @ (q_range.T @ mat[rows])
        lin_parts.append(h_x[:, :k_x])
        non_parts.append(h_x[:, k_x:k_x + q_x])
    k_total = sum(linear_counts)
    q_total = sum(nonlinear_counts)
    stacked = np.concatenate(lin_parts + non_parts, axis=1)
    q_mat, r_mat = np.linalg.qr(stacked, mode="reduced")
    diag = np.abs(np.diag(r_mat))
    redundant = bool(diag.size and diag.min() < REDUNDANT_DIAG_TOL * max(diag.max(), 1.0))

    phi_lin = np.zeros((n, k_total))
    phi_nonlin = np.zeros((n, q_total))
    phi_lin[rows] = q_mat[:, :k_total]
    phi_nonlin[rows] = q_mat[:, k_total:k_total + q_total]
    sv = np.asarray(singular_values, dtype=float) if singular_values is not None else np.zeros(0)
    return FieldBasis(
        phi_lin=phi_lin,
        phi_nonlin=phi_nonlin,
        xi=np.zeros((q_total, 0)),
        singular_values=sv,
        field=field,
        redundant=redundant,
    )


# ---------------------------------------------------------------------------
# Basis file. Header: magic, version u32, flags u32, then u64 fields
# p, k, l, m, q, r, n and the three singular-value lengths, then the three
# gammas as f64, then per field phi_lin, phi_nonlin, xi (f64, column-major)
# followed by its singular values.
# ---------------------------------------------------------------------------


def write_basis(basis: ManifoldBasis, path) -> None:
    k, l, m = basis.mode_counts
    q = basis.u.q
    flags = 1 if any(f.redundant for f in basis.fields) else 0
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(np.asarray([BASIS_VERSION, flags], dtype="<u4").tobytes())
        counts = [basis.p, k, l, m, q, basis.r, basis.n]
        counts += [f.singular_values.size for f in basis.fields]
        fh.write(np.asarray(counts, dtype="<u8").tobytes())
        fh.write(np.asarray([f.gamma for f in basis.fields], dtype="<f8").tobytes())
        for fb in basis.fields:
            for mat in (fb.phi_lin, fb.phi_nonlin, fb.xi):
                fh.write(np.asarray(mat, dtype="<f8").tobytes(order="F"))
            fh.write(np.asarray(fb.singular_values, dtype="<f8").tobytes())


def _take(blob, off, dtype, count, what):
    item = np.dtype(dtype).itemsize
    end = off + item * count
    if len(blob) < end:
        raise FormatError(f"truncated basis file while reading {what}", offset=len(blob))
    return np.frombuffer(blob, dtype=dtype, count=count, offset=off), end


def read_basis(path) -> ManifoldBasis:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != BASIS_MAGIC:
        raise FormatError("bad basis magic", offset=0)
    off = 8
    head, off = _take(blob, off, "<u4", 2, "version")
    version, flags = int(head[0]), int(head[1])
    if version != BASIS_VERSION:
        raise FormatError(f"unsupported basis version {version}", offset=8)
    counts, off = _take(blob, off, "<u8", 10, "counts")
    p, k, l, m, q, r, n, s_u, s_d, s_t = (int(v) for v in counts)
    if r != k + l + m:
        raise FormatError("inconsistent mode counts in basis header", offset=16)
    gammas, off = _take(blob, off, "<f8", 3, "gammas")
    fields = []
    for field_id, (modes, sv_len) in enumerate(((k, s_u), (l, s_d), (m, s_t))):
        mats = []
        for rows_, cols_ in ((n, modes), (n, q), (q, (p - 1) * modes)):
            flat, off = _take(blob, off, "<f8", rows_ * cols_, "matrix")
            mats.append(flat.reshape((rows_, cols_), order="F").copy())
        sv, off = _take(blob, off, "<f8", sv_len, "singular values")
        fields.append(FieldBasis(mats[0], mats[1], mats[2], sv.copy(), field_id,
                                 gamma=float(gammas[field_id]),
                                 redundant=bool(flags & 1)))
    if off != len(blob):
        raise FormatError("trailing bytes in basis file", offset=off)
    return assemble_global_basis(fields[0], fields[1], fields[2], p)

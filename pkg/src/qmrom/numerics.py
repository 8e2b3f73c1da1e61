"""Deterministic dense linear-algebra kernels.

Thin SVD, economic QR, seeded randomized range finding, sparse
non-negative least squares with threshold-based early termination, and a
dense LU solve with partial pivoting. All routines operate on plain
float64 numpy arrays and are pure functions of their inputs; LAPACK
backs the factorizations, the sparse NNLS is implemented here because
the early-termination branch is not available in library solvers.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg as la

from .errors import InvalidInputError, NumericalFailureError, SingularMatrixError

_EPS = np.finfo(float).eps


class SvdResult(NamedTuple):
    """Thin SVD ``A = left @ diag(singular_values) @ right.T``."""

    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray


class QrResult(NamedTuple):
    """Economic QR ``A = q @ r`` with ``r`` upper triangular.

    ``rank_deficient`` is set when a diagonal entry of ``r`` is
    negligible relative to the largest one.
    """

    q: np.ndarray
    r: np.ndarray
    rank_deficient: bool


class NnlsSolution(NamedTuple):
    weights: np.ndarray
    residual_norm_sq: float
    active_set: np.ndarray


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-dimensional, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return v


def thin_svd(a) -> SvdResult:
    """Thin singular value decomposition of a dense matrix.

    Returns orthonormal left/right vector blocks and the non-increasing
    singular value sequence, with ``min(rows, cols)`` triplets.
    """
    a = _as_matrix(a)
    if min(a.shape) < 1:
        raise InvalidInputError("thin_svd requires at least one row and one column")
    try:
        left, sv, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK rarely fails
        raise NumericalFailureError(f"SVD did not converge: {exc}") from exc
    return SvdResult(left, sv, vh.T)


def qr_decompose(a) -> QrResult:
    """Economic QR factorization of a tall matrix (rows >= cols)."""
    a = _as_matrix(a)
    rows, cols = a.shape
    if rows < cols:
        raise InvalidInputError(f"qr_decompose requires rows >= cols, got {rows} x {cols}")
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.abs(np.diag(r))
    scale = diag.max() if diag.size else 0.0
    rank_deficient = bool(diag.size and (scale == 0.0 or np.any(diag <= max(rows, cols) * _EPS * scale)))
    return QrResult(q, r, rank_deficient)


def randomized_range(a, target_rank: int, oversample: int, seed: int) -> np.ndarray:
    """Orthonormal range approximation Q of A from a seeded Gaussian sketch.

    The sketch is ``Y = A @ Omega`` with ``Omega`` drawn i.i.d. standard
    normal from ``numpy.random.default_rng(seed)``; Q is the economic QR
    factor of Y with ``kappa = min(target_rank + oversample, cols)``
    columns. Identical inputs give bit-identical output.
    """
    a = _as_matrix(a)
    if target_rank < 0 or oversample < 0:
        raise InvalidInputError("target_rank and oversample must be non-negative")
    rows, cols = a.shape
    kappa = min(target_rank + oversample, cols)
    if kappa == 0:
        raise InvalidInputError("randomized_range needs at least one sketch column")
    if kappa > rows:
        raise InvalidInputError(
            f"sketch width {kappa} exceeds row count {rows}; lower target_rank/oversample"
        )
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((cols, kappa))
    y = a @ omega
    q, _ = np.linalg.qr(y, mode="reduced")
    return q


def nnls_sparse(c, d, tau: float, max_iter: int | None = None) -> NnlsSolution:
    """Lawson-Hanson NNLS with a threshold-based early termination branch.

    Minimizes ``||C x - d||_2`` subject to ``x >= 0``, terminating as soon
    as ``||C x - d||^2 <= tau * ||d||^2`` or when the standard optimality
    condition holds. Ties in the gradient selection go to the lowest
    column index so results are deterministic.
    """
    c = _as_matrix(c, "C")
    d = _as_vector(d, "d")
    if tau < 0:
        raise InvalidInputError(f"tau must be non-negative, got {tau}")
    m, n = c.shape
    if d.shape[0] != m:
        raise InvalidInputError(f"C has {m} rows but d has {d.shape[0]} entries")
    if max_iter is None:
        max_iter = 10 * n

    d_norm_sq = float(d @ d)
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    resid = d.copy()
    resid_sq = d_norm_sq
    tiny = _EPS
    c_scale = np.abs(c).max(initial=0.0)
    grad_tol = 10.0 * _EPS * max(m, n) * max(1.0, c_scale) * max(1.0, np.abs(d).max(initial=0.0))

    def _solution() -> NnlsSolution:
        r = d - c @ x
        return NnlsSolution(x.copy(), float(r @ r), np.flatnonzero(x > 0.0))

    iterations = 0
    while True:
        if resid_sq <= tau * d_norm_sq:
            break
        w = c.T @ resid
        w[passive] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= grad_tol:
            break
        passive[j] = True

        while True:
            iterations += 1
            if iterations > max_iter:
                raise NumericalFailureError(
                    f"sparse NNLS exceeded {max_iter} iterations", best=_solution()
                )
            cols = np.flatnonzero(passive)
            z_passive, *_ = np.linalg.lstsq(c[:, cols], d, rcond=None)
            z = np.zeros(n)
            z[cols] = z_passive
            if np.all(z[cols] > tiny):
                x = z
                break
            # Step back along x -> z until a passive component hits zero,
            # then drop the vanished components from the passive set.
            bad = passive & (z <= tiny) & (np.abs(x - z) > tiny * np.abs(x))
            idx = np.flatnonzero(bad)
            if idx.size == 0:
                x = np.maximum(z, 0.0)
                break
            alpha = np.min(x[idx] / (x[idx] - z[idx]))
            x = x + alpha * (z - x)
            passive &= x > tiny
            x[~passive] = 0.0

        new_resid = d - c @ x
        new_resid_sq = float(new_resid @ new_resid)
        # Guard against cycling from roundoff: stop if no progress was made.
        if new_resid_sq >= resid_sq * (1.0 - 10.0 * _EPS) and new_resid_sq > tau * d_norm_sq:
            resid, resid_sq = new_resid, new_resid_sq
            break
        resid, resid_sq = new_resid, new_resid_sq

    x[np.abs(x) <= tiny] = 0.0
    final = d - c @ x
    return NnlsSolution(x, float(final @ final), np.flatnonzero(x > 0.0))


def solve_dense(a, b) -> np.ndarray:
    """Solve a dense square system by LU with partial pivoting."""
    a = _as_matrix(a, "A")
    b = _as_vector(b, "b")
    n, m = a.shape
    if n != m:
        raise InvalidInputError(f"A must be square, got {n} x {m}")
    if b.shape[0] != n:
        raise InvalidInputError(f"A is {n} x {n} but b has {b.shape[0]} entries")
    if n == 0:
        return np.zeros(0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu, piv = la.lu_factor(a, check_finite=False)
    diag = np.abs(np.diag(lu))
    floor = max(n, 1) * _EPS * max(np.abs(a).max(), 1e-300)
    small = np.flatnonzero(diag <= floor)
    if small.size:
        raise SingularMatrixError(
            f"matrix singular to working precision (pivot {int(small[0])})",
            pivot_index=int(small[0]),
        )
    return la.lu_solve((lu, piv), b, check_finite=False)

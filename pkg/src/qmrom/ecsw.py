"""ECSW hyperreduction training.

Training states are reconstructed on the quadratic manifold by the
Gauss-Newton encoder, element residuals are evaluated with the recorded
internal variables of each training step (history replay), and the
virtual-work system C xi = d (d being the row sums of C) is solved by
sparse NNLS with the tolerance-based early termination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EcswTrainingError, InvalidInputError, NumericalFailureError, TrainingDataError
from .fom import Mesh1D, elements_residual
from .manifold import ManifoldBasis, decode, encode_nonlinear
from .material import MaterialParams, QpState
from .numerics import nnls_sparse

WEIGHTS_MAGIC = b"QMORECW1"
WEIGHTS_VERSION = 1
DEGENERATE_RATIO = 1e-8


@dataclass
class EcswWeights:
    """Selected element set with positive virtual-work weights."""

    element_ids: np.ndarray
    weights: np.ndarray
    tau: float
    achieved_residual_ratio: float

    def __post_init__(self) -> None:
        self.element_ids = np.asarray(self.element_ids, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        order = np.argsort(self.element_ids)
        self.element_ids = self.element_ids[order]
        self.weights = self.weights[order]
        if np.any(self.weights <= 0.0):
            raise InvalidInputError("ECSW weights must be strictly positive")

    @property
    def n_s(self) -> int:
        return self.element_ids.size

    @classmethod
    def all_elements(cls, n_elements: int) -> "EcswWeights":
        return cls(np.arange(n_elements), np.ones(n_elements), tau=0.0,
                   achieved_residual_ratio=0.0)


@dataclass
class TrainingSystem:
    """Stacked per-step reduced element residuals and their row sums."""

    C: np.ndarray                  # (r * n_train, N_e)
    d: np.ndarray                  # row sums of C
    train_step_ids: list[int]
    degenerate: bool = False
    meta: dict = field(default_factory=dict)


def build_training_system(history, basis: ManifoldBasis, mesh: Mesh1D,
                          params: MaterialParams, train_steps=None,
                          encoder_tol: float = 1e-10) -> TrainingSystem:
    """Assemble the ECSW training matrix from a recorded run.

    For each training step the snapshot is re-encoded on the manifold,
    decoded back (with prescribed DOFs copied from the record so the
    reconstruction stays BC-consistent), and every element residual is
    projected by the element slice of the linear basis.
    """
    n_step = history.n_step
    if train_steps is None:
        train_steps = list(range(1, n_step + 1))
    train_steps = [int(j) for j in train_steps]
    if any(j < 1 or j > n_step for j in train_steps):
        raise InvalidInputError("train_steps outside the recorded range")

    r = basis.r
    n_e = mesh.n_elements
    edofs = mesh.element_dofs
    phi_e = basis.phi_lin[edofs]                     # (N_e, 6, r)
    bc_rows = np.flatnonzero(np.all(basis.phi_lin == 0.0, axis=1))

    c = np.zeros((r * len(train_steps), n_e))
    for row, j in enumerate(train_steps):
        u_full = history.solutions[j - 1]
        u_red, converged = encode_nonlinear(basis, u_full, tol=encoder_tol)
        if not converged:
            raise TrainingDataError(f"manifold encoder did not converge at step {j}")
        u_rec = decode(basis, u_red)
        u_rec[bc_rows] = u_full[bc_rows]
        u_prev = history.solutions[j - 2] if j >= 2 else history.initial_solution
        states = history.qp_states[j - 2] if j >= 2 else history.initial_state
        r_e, _ = elements_residual(mesh, states, u_rec, u_prev, params, history.dt)
        c[row * r:(row + 1) * r, :] = np.einsum("eij,ei->je", phi_e, r_e)

    d = c.sum(axis=1)
    col_norm = np.sqrt((c * c).sum(axis=0))
    scale = col_norm.max(initial=0.0)
    degenerate = bool(np.linalg.norm(d) <= DEGENERATE_RATIO * max(scale, 1e-300))
    return TrainingSystem(C=c, d=d, train_step_ids=train_steps, degenerate=degenerate,
                          meta={"r": r, "n_elements": n_e})


def train(sys: TrainingSystem, tau: float) -> EcswWeights:
    """Solve the sparse NNLS training problem at tolerance tau."""
    if not (0.0 < tau <= 1.0):
        raise InvalidInputError(f"tau must lie in (0, 1], got {tau}")
    if sys.degenerate:
        raise EcswTrainingError(
            "training system is degenerate (near-zero accumulated residual); "
            "the basis reproduces the training states exactly"
        )
    d_norm_sq = float(sys.d @ sys.d)
    try:
        sol = nnls_sparse(sys.C, sys.d, tau)
    except NumericalFailureError as exc:
        best = exc.best
        partial = None
        if best is not None:
            keep = np.flatnonzero(best.weights > 0.0)
            if keep.size:
                partial = EcswWeights(keep, best.weights[keep], tau,
                                      best.residual_norm_sq / d_norm_sq)
        raise EcswTrainingError(f"sparse NNLS failed: {exc}", partial=partial) from exc
    keep = np.flatnonzero(sol.weights > 0.0)
    ratio = sol.residual_norm_sq / d_norm_sq if d_norm_sq > 0 else 0.0
    if keep.size == 0:
        # tau >= 1 admits the empty selection; represent it explicitly.
        return EcswWeights(np.zeros(0, dtype=int), np.zeros(0), tau, ratio)
    return EcswWeights(keep, sol.weights[keep], tau, ratio)


@dataclass
class WeightsReport:
    ratio: float
    non_negative: bool
    n_s: int
    n_elements: int
    passed: bool


def validate_weights(sys: TrainingSystem, w: EcswWeights) -> WeightsReport:
    """Recompute the residual ratio and check the weight invariants."""
    xi = np.zeros(sys.C.shape[1])
    xi[w.element_ids] = w.weights
    resid = sys.C @ xi - sys.d
    d_norm_sq = float(sys.d @ sys.d)
    ratio = float(resid @ resid) / d_norm_sq if d_norm_sq > 0 else 0.0
    non_negative = bool(np.all(w.weights >= 0.0))
    passed = non_negative and (w.tau <= 0.0 or ratio <= w.tau)
    return WeightsReport(ratio=ratio, non_negative=non_negative, n_s=w.n_s,
                         n_elements=sys.C.shape[1], passed=passed)


def write_weights(w: EcswWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(np.asarray([WEIGHTS_VERSION], dtype="<u4").tobytes())
        fh.write(np.asarray([w.tau], dtype="<f8").tobytes())
        fh.write(np.asarray([w.n_s], dtype="<u8").tobytes())
        pairs = np.empty(w.n_s, dtype=[("id", "<u8"), ("weight", "<f8")])
        pairs["id"] = w.element_ids
        pairs["weight"] = w.weights
        fh.write(pairs.tobytes())


def read_weights(path) -> EcswWeights:
    from .errors import FormatError

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != WEIGHTS_MAGIC:
        raise FormatError("bad weights magic", offset=0)
    off = 8
    if len(blob) < off + 4 + 8 + 8:
        raise FormatError("truncated weights header", offset=len(blob))
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=off)[0])
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}", offset=off)
    off += 4
    tau = float(np.frombuffer(blob, dtype="<f8", count=1, offset=off)[0])
    off += 8
    n_s = int(np.frombuffer(blob, dtype="<u8", count=1, offset=off)[0])
    off += 8
    end = off + 16 * n_s
    if len(blob) < end:
        raise FormatError("truncated weights payload", offset=len(blob))
    pairs = np.frombuffer(blob, dtype=[("id", "<u8"), ("weight", "<f8")], count=n_s, offset=off)
    if n_s == 0:
        return EcswWeights(np.zeros(0, dtype=int), np.zeros(0), tau, 0.0)
    # The achieved ratio is not part of the file format; tau is its
    # certified upper bound for weights written after successful training.
    return EcswWeights(pairs["id"].astype(int), pairs["weight"].astype(float), tau,
                       achieved_residual_ratio=tau)


def write_weights_csv(w: EcswWeights, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("element_id,weight\n")
        for eid, wt in zip(w.element_ids, w.weights):
            fh.write(f"{eid},{wt:.17g}\n")

"""Snapshot storage, multi-field/multi-state decomposition, and file I/O.

Snapshot matrices hold one converged global solution per column.
Decomposition into displacement, nonlocal-damage and temperature fields
is an exact zero-padded partition of the rows; the multi-state split is
an exact zero-padded partition of the columns into elastic, hardening
and softening ranges. Reassembly of either split is bitwise identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInputError

FIELD_DISPLACEMENT = 0
FIELD_DAMAGE = 1
FIELD_TEMPERATURE = 2
FIELD_NAMES = {FIELD_DISPLACEMENT: "u", FIELD_DAMAGE: "damage", FIELD_TEMPERATURE: "theta"}

SNAPSHOT_MAGIC = b"QMORSNAP"
SNAPSHOT_VERSION = 1


@dataclass
class SnapshotSet:
    """Dense solution history with per-DOF field tags."""

    matrix: np.ndarray                 # (n, n_step), column j = step j+1
    field_tags: np.ndarray             # (n,) uint8 in {0, 1, 2}
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.field_tags = np.asarray(self.field_tags, dtype=np.uint8)
        if self.matrix.ndim != 2:
            raise InvalidInputError("snapshot matrix must be 2-dimensional")
        if self.field_tags.shape[0] != self.matrix.shape[0]:
            raise InvalidInputError("one field tag per DOF is required")
        if self.matrix.shape[1] < 1:
            raise InvalidInputError("a snapshot set needs at least one column")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_step(self) -> int:
        return self.matrix.shape[1]

    def rows_of(self, field_id: int) -> np.ndarray:
        return np.flatnonzero(self.field_tags == field_id)


@dataclass
class FieldSnapshots:
    """Zero-padded per-field snapshot matrices (exact additive split)."""

    u: np.ndarray
    damage: np.ndarray
    theta: np.ndarray

    def by_field(self, field_id: int) -> np.ndarray:
        return (self.u, self.damage, self.theta)[field_id]


@dataclass(frozen=True)
class StateSegmentation:
    """Step counts closing the elastic and hardening regimes."""

    n_e: int
    n_h: int
    n_step: int
    degenerate: bool = False

    def __post_init__(self) -> None:
        if not (0 <= self.n_e <= self.n_h <= self.n_step):
            raise InvalidInputError(
                f"segmentation must satisfy 0 <= n_e <= n_h <= n_step, got "
                f"({self.n_e}, {self.n_h}, {self.n_step})"
            )


def decompose_fields(snap: SnapshotSet) -> FieldSnapshots:
    """Split rows by field tag into three zero-padded matrices."""
    known = np.isin(snap.field_tags, (FIELD_DISPLACEMENT, FIELD_DAMAGE, FIELD_TEMPERATURE))
    if not known.all():
        bad = int(np.flatnonzero(~known)[0])
        raise FormatError(f"unknown field tag {snap.field_tags[bad]} at row {bad}")
    parts = []
    for field_id in (FIELD_DISPLACEMENT, FIELD_DAMAGE, FIELD_TEMPERATURE):
        part = np.zeros_like(snap.matrix)
        rows = snap.rows_of(field_id)
        part[rows] = snap.matrix[rows]
        parts.append(part)
    return FieldSnapshots(*parts)


def segment_states(history) -> StateSegmentation:
    """Segment a run into elastic / hardening / softening step ranges.

    The elastic range ends at the last step without accumulated plastic
    strain anywhere; the hardening range ends at the step of maximum
    absolute reaction force.
    """
    n_step = history.n_step
    if n_step < 1:
        raise InvalidInputError("history holds no accepted steps")
    n_e = 0
    for j, st in enumerate(history.qp_states, start=1):
        if st.xi_p.max(initial=0.0) > 0.0:
            break
        n_e = j
    if n_e == n_step:
        return StateSegmentation(n_step, n_step, n_step, degenerate=True)
    forces = np.abs(np.asarray(history.reaction_force, dtype=float))
    n_h = int(np.argmax(forces)) + 1
    n_h = min(max(n_h, n_e), n_step)
    return StateSegmentation(n_e, n_h, n_step)


def split_states(field_matrix: np.ndarray, seg: StateSegmentation):
    """Column-block split into (elastic, hardening, softening) matrices.

    Each part keeps the full shape with zero columns outside its range so
    that the three parts sum bitwise to the input.
    """
    field_matrix = np.asarray(field_matrix, dtype=float)
    if field_matrix.shape[1] != seg.n_step:
        raise InvalidInputError(
            f"segmentation covers {seg.n_step} columns but matrix has {field_matrix.shape[1]}"
        )
    parts = []
    for lo, hi in ((0, seg.n_e), (seg.n_e, seg.n_h), (seg.n_h, seg.n_step)):
        part = np.zeros_like(field_matrix)
        part[:, lo:hi] = field_matrix[:, lo:hi]
        parts.append(part)
    return tuple(parts)


def state_column_ranges(seg: StateSegmentation):
    return ((0, seg.n_e), (seg.n_e, seg.n_h), (seg.n_h, seg.n_step))


def predictive_column_indices(n_step: int) -> np.ndarray:
    """Steps 1, 3, ... up to n_step-1 as zero-based column indices."""
    if n_step < 2:
        raise InvalidInputError("predictive subsampling needs at least two steps")
    return np.arange(0, n_step - 1, 2)


def assemble_predictive(minus: SnapshotSet, plus: SnapshotSet) -> FieldSnapshots:
    """Per-field predictive matrices: odd-step subsamples, minus then plus."""
    if minus.n != plus.n or not np.array_equal(minus.field_tags, plus.field_tags):
        raise FormatError("predictive runs disagree in size or field tags")
    idx_m = predictive_column_indices(minus.n_step)
    idx_p = predictive_column_indices(plus.n_step)
    fields_m = decompose_fields(minus)
    fields_p = decompose_fields(plus)
    parts = []
    for field_id in (FIELD_DISPLACEMENT, FIELD_DAMAGE, FIELD_TEMPERATURE):
        m_part = fields_m.by_field(field_id)[:, idx_m]
        p_part = fields_p.by_field(field_id)[:, idx_p]
        parts.append(np.concatenate([m_part, p_part], axis=1))
    return FieldSnapshots(*parts)


# ---------------------------------------------------------------------------
# Binary format: magic, version u32, n u64, n_step u64, n tag bytes,
# then n * n_step float64 values in column-major order (all little endian).
# ---------------------------------------------------------------------------


def write_snapshots(snap: SnapshotSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(np.asarray([SNAPSHOT_VERSION], dtype="<u4").tobytes())
        fh.write(np.asarray([snap.n, snap.n_step], dtype="<u8").tobytes())
        fh.write(snap.field_tags.astype(np.uint8).tobytes())
        fh.write(np.asarray(snap.matrix, dtype="<f8").tobytes(order="F"))


def read_snapshots(path) -> SnapshotSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != SNAPSHOT_MAGIC:
        raise FormatError("bad snapshot magic", offset=0)
    off = 8
    if len(blob) < off + 4:
        raise FormatError("truncated snapshot version", offset=len(blob))
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=off)[0])
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}", offset=off)
    off += 4
    if len(blob) < off + 16:
        raise FormatError("truncated snapshot header", offset=len(blob))
    n, n_step = (int(v) for v in np.frombuffer(blob, dtype="<u8", count=2, offset=off))
    off += 16
    if len(blob) < off + n:
        raise FormatError("truncated field tags", offset=len(blob))
    tags = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off).copy()
    off += n
    end = off + 8 * n * n_step
    if len(blob) < end:
        raise FormatError("truncated snapshot values", offset=len(blob))
    values = np.frombuffer(blob, dtype="<f8", count=n * n_step, offset=off)
    matrix = values.reshape((n, n_step), order="F").copy()
    return SnapshotSet(matrix=matrix, field_tags=tags)


def export_csv(snap: SnapshotSet, path) -> None:
    """Plot-friendly mirror: header dof_0,... then one row per step."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"dof_{i}" for i in range(snap.n)) + "\n")
        for j in range(snap.n_step):
            fh.write(",".join(f"{v:.17g}" for v in snap.matrix[:, j]) + "\n")

"""Error and efficiency metrics plus singular-value decay reports."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError
from .numerics import thin_svd
from .snapshots import (
    FIELD_DAMAGE,
    FIELD_DISPLACEMENT,
    FIELD_TEMPERATURE,
    SnapshotSet,
)

SV_THRESHOLD = 1e-6


class CpuRatio(NamedTuple):
    """Both readings of the CPU time ratio.

    ``per_step_sum`` sums the per-step ratios as printed (N for equal
    series); ``aggregate`` is the ratio of total times (1 for equal
    series). The aggregate form is the one used in acceptance checks.
    """

    per_step_sum: float
    aggregate: float


@dataclass
class MetricsReport:
    eps_r_u: float
    eps_r_theta: float
    eps_a_damage: float
    eta_s: CpuRatio
    eta_w: CpuRatio
    probe_dofs: tuple[int, int, int]

    def rows(self):
        return [
            ("eps_r_u", self.eps_r_u),
            ("eps_r_theta", self.eps_r_theta),
            ("eps_a_damage", self.eps_a_damage),
            ("eta_s_aggregate", self.eta_s.aggregate),
            ("eta_s_per_step_sum", self.eta_s.per_step_sum),
            ("eta_w_aggregate", self.eta_w.aggregate),
            ("eta_w_per_step_sum", self.eta_w.per_step_sum),
            ("probe_dof_u", self.probe_dofs[0]),
            ("probe_dof_damage", self.probe_dofs[1]),
            ("probe_dof_theta", self.probe_dofs[2]),
        ]


def relative_error(red, full) -> float:
    """Mean relative pointwise error (1/N) sum |red - full| / |full|."""
    red = np.asarray(red, dtype=float).reshape(-1)
    full = np.asarray(full, dtype=float).reshape(-1)
    if red.shape != full.shape or red.size < 1:
        raise InvalidInputError("series must share a positive length")
    if np.any(full == 0.0):
        raise InvalidInputError(
            "reference series vanishes at some step; use the absolute metric instead")
    return float(np.mean(np.abs(red - full) / np.abs(full)))


def absolute_error_damage(red, full) -> float:
    """Mean absolute pointwise error (1/N) sum |red - full|."""
    red = np.asarray(red, dtype=float).reshape(-1)
    full = np.asarray(full, dtype=float).reshape(-1)
    if red.shape != full.shape or red.size < 1:
        raise InvalidInputError("series must share a positive length")
    return float(np.mean(np.abs(red - full)))


def cpu_ratio(red_times, full_times) -> CpuRatio:
    """Per-step-sum and aggregate time ratios; zero full steps are skipped."""
    red = np.asarray(red_times, dtype=float).reshape(-1)
    full = np.asarray(full_times, dtype=float).reshape(-1)
    if red.shape != full.shape or red.size < 1:
        raise InvalidInputError("timing series must share a positive length")
    ok = full > 0.0
    if not ok.all():
        warnings.warn(
            f"skipping {int((~ok).sum())} steps with zero full-model time", stacklevel=2)
    if not ok.any():
        raise InvalidInputError("every full-model step time is zero")
    per_step = float(np.sum(red[ok] / full[ok]))
    aggregate = float(red[ok].sum() / full[ok].sum())
    return CpuRatio(per_step, aggregate)


def cpu_ratios(rom_solve, fom_solve, rom_wall, fom_wall):
    """(eta_s, eta_w) from the solve-only and wall-clock time series."""
    return cpu_ratio(rom_solve, fom_solve), cpu_ratio(rom_wall, fom_wall)


@dataclass
class SvReport:
    """Normalized singular values per field plus the full-field set."""

    fields: dict[str, np.ndarray]          # name -> sigma_i / sigma_1
    raw: dict[str, np.ndarray]             # name -> sigma_i
    crossing: dict[str, int]               # first 1-based i with sigma_i/sigma_1 < 1e-6
    kolmogorov_proxy: dict[str, np.ndarray]  # d_n ~ sigma_{n+1}


def _normalized(sv: np.ndarray) -> np.ndarray:
    if sv.size == 0 or sv[0] == 0.0:
        return np.zeros_like(sv)
    return sv / sv[0]


def _crossing_index(normalized: np.ndarray) -> int:
    below = np.flatnonzero(normalized < SV_THRESHOLD)
    if below.size == 0:
        return normalized.size + 1
    return int(below[0]) + 1


def sv_report(snap: SnapshotSet) -> SvReport:
    """Singular-value decay per field and for the full snapshot matrix."""
    if snap.n_step < 2:
        raise InvalidInputError("singular-value report needs at least two steps")
    names = {FIELD_DISPLACEMENT: "u", FIELD_DAMAGE: "damage", FIELD_TEMPERATURE: "theta"}
    fields, raw, crossing, proxy = {}, {}, {}, {}
    for field_id, name in names.items():
        rows = snap.rows_of(field_id)
        sub = snap.matrix[rows]
        sv = thin_svd(sub).singular_values if min(sub.shape) else np.zeros(0)
        nrm = _normalized(sv)
        fields[name] = nrm
        raw[name] = sv
        crossing[name] = _crossing_index(nrm)
        proxy[name] = sv[1:]
    sv = thin_svd(snap.matrix).singular_values
    nrm = _normalized(sv)
    fields["full"] = nrm
    raw["full"] = sv
    crossing["full"] = _crossing_index(nrm)
    proxy["full"] = sv[1:]
    return SvReport(fields=fields, raw=raw, crossing=crossing, kolmogorov_proxy=proxy)


def probe_dofs(mesh) -> tuple[int, int, int]:
    """Probe DOFs: mid-bar node for u and theta, defect-side node for damage."""
    mid = mesh.n_nodes // 2
    defect = mesh.defect_element if mesh.defect_element is not None else mesh.n_elements // 2
    return (mesh.dof_u(mid), mesh.dof_damage(defect), mesh.dof_theta(mid))


def compare_runs(mesh, fom_snap: SnapshotSet, rom_snap: SnapshotSet,
                 fom_solve, fom_wall, rom_solve, rom_wall) -> MetricsReport:
    """Probe-point error metrics and CPU ratios between two runs."""
    if fom_snap.n != rom_snap.n or fom_snap.n_step != rom_snap.n_step:
        raise InvalidInputError("runs disagree in size; cannot compare")
    dof_u, dof_d, dof_t = probe_dofs(mesh)
    eps_r_u = relative_error(rom_snap.matrix[dof_u], fom_snap.matrix[dof_u])
    eps_r_theta = relative_error(rom_snap.matrix[dof_t], fom_snap.matrix[dof_t])
    eps_a = absolute_error_damage(rom_snap.matrix[dof_d], fom_snap.matrix[dof_d])
    eta_s, eta_w = cpu_ratios(rom_solve, fom_solve, rom_wall, fom_wall)
    return MetricsReport(eps_r_u, eps_r_theta, eps_a, eta_s, eta_w, (dof_u, dof_d, dof_t))


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,value\n")
        for name, value in report.rows():
            if isinstance(value, float):
                fh.write(f"{name},{value:.17g}\n")
            else:
                fh.write(f"{name},{value}\n")


def write_sv_csv(report: SvReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("field,index,sigma_normalized\n")
        for name, values in report.fields.items():
            for i, v in enumerate(values, start=1):
                fh.write(f"{name},{i},{v:.17g}\n")

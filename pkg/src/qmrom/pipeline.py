"""Stage orchestration shared by the command line and the test suite.

Run directories hold the stage artifacts: a full-order run writes
snapshots.qms, force_disp.csv, timings.csv and history.bin; a reduced
run writes rom_solution.qms, rom_force_disp.csv and rom_timings.csv.
Basis construction zeroes the rows of prescribed DOFs before any SVD so
every basis column vanishes there; prescribed values are injected during
reconstruction instead.
"""

from __future__ import annotations

import os

import numpy as np

from . import fom as fom_mod
from . import manifold as mf
from .config import Config
from .ecsw import EcswWeights, TrainingSystem, build_training_system, train
from .errors import InvalidInputError
from .fom import FomHistory, dirichlet_bc, run_fom
from .manifold import FieldBasis, ManifoldBasis, assemble_global_basis, build_field_basis
from .material import QpState
from .metrics import MetricsReport, compare_runs, write_metrics_csv
from .rom import RomSolution, run_rom
from .snapshots import (
    FIELD_DAMAGE,
    FIELD_DISPLACEMENT,
    FIELD_TEMPERATURE,
    FieldSnapshots,
    SnapshotSet,
    decompose_fields,
    read_snapshots,
    segment_states,
    split_states,
    state_column_ranges,
    write_snapshots,
)

RUN_SNAPSHOTS = "snapshots.qms"
RUN_FORCE = "force_disp.csv"
RUN_TIMINGS = "timings.csv"
RUN_HISTORY = "history.bin"
ROM_SNAPSHOTS = "rom_solution.qms"
ROM_FORCE = "rom_force_disp.csv"
ROM_TIMINGS = "rom_timings.csv"
METRICS_FILE = "metrics.csv"
SV_REPORT_FILE = "sv_report.csv"
BASIS_FILE = "basis.qmb"
WEIGHTS_FILE = "weights.qmw"

_FIELDS = (FIELD_DISPLACEMENT, FIELD_DAMAGE, FIELD_TEMPERATURE)


def run_fom_to_dir(config: Config, outdir) -> tuple[FomHistory, SnapshotSet]:
    os.makedirs(outdir, exist_ok=True)
    mesh = config.make_mesh()
    history, snap = run_fom(mesh, config.material, config.loading,
                            tol=config.rom.tol, max_iter=config.rom.max_iter)
    write_snapshots(snap, os.path.join(outdir, RUN_SNAPSHOTS))
    fom_mod.write_force_disp(os.path.join(outdir, RUN_FORCE), history)
    fom_mod.write_timings(os.path.join(outdir, RUN_TIMINGS),
                          history.step_times_solve, history.step_times_wall)
    fom_mod.write_history(os.path.join(outdir, RUN_HISTORY), history)
    return history, snap


def load_fom_run(config: Config, run_dir) -> tuple[FomHistory, SnapshotSet]:
    """Rebuild a replayable history from a run directory."""
    mesh = config.make_mesh()
    snap = read_snapshots(os.path.join(run_dir, RUN_SNAPSHOTS))
    qp_states = fom_mod.read_history(os.path.join(run_dir, RUN_HISTORY))
    u_presc, forces = fom_mod.read_force_disp(os.path.join(run_dir, RUN_FORCE))
    solve_t, wall_t = fom_mod.read_timings(os.path.join(run_dir, RUN_TIMINGS))
    if snap.n != mesh.n_dofs:
        raise InvalidInputError(
            f"run has {snap.n} DOFs but the config mesh carries {mesh.n_dofs}")
    history = FomHistory(
        solutions=[snap.matrix[:, j].copy() for j in range(snap.n_step)],
        qp_states=qp_states,
        reaction_force=list(forces),
        u_prescribed=list(u_presc),
        step_times_solve=list(solve_t),
        step_times_wall=list(wall_t),
        initial_solution=fom_mod.initial_solution(mesh, config.material),
        initial_state=QpState.zeros(mesh.n_qp),
        dt=config.loading.t_end / config.loading.n_step,
    )
    return history, snap


def prescribed_dofs(config: Config) -> np.ndarray:
    mesh = config.make_mesh()
    bc = dirichlet_bc(mesh, 0.0, 0.0, config.loading.theta_left, config.loading.theta_right)
    return bc.dofs


def free_field_rows(field_tags: np.ndarray, field_id: int, bc_dofs) -> np.ndarray:
    rows = np.flatnonzero(field_tags == field_id)
    return np.setdiff1d(rows, np.asarray(bc_dofs, dtype=int))


def zeroed_fields(fields: FieldSnapshots, bc_dofs) -> FieldSnapshots:
    parts = []
    for fid in _FIELDS:
        part = fields.by_field(fid).copy()
        part[np.asarray(bc_dofs, dtype=int)] = 0.0
        parts.append(part)
    return FieldSnapshots(*parts)


def field_ranks(snap: SnapshotSet, bc_dofs, rtol: float = 1e-12):
    """Numerical rank of each zero-padded free-row field block."""
    fields = zeroed_fields(decompose_fields(snap), bc_dofs)
    ranks = []
    for fid in _FIELDS:
        rows = free_field_rows(snap.field_tags, fid, bc_dofs)
        sub = fields.by_field(fid)[rows]
        sv = np.linalg.svd(sub, compute_uv=False)
        cutoff = rtol * sv[0] if sv.size and sv[0] > 0 else 0.0
        ranks.append(int(np.sum(sv > cutoff)))
    return tuple(ranks)


def _field_settings(config: Config, overrides: dict | None):
    over = overrides or {}
    rom = config.rom
    modes = (over.get("k", rom.k), over.get("l", rom.l), over.get("m", rom.m))
    q = over.get("q", rom.q)
    p = over.get("p", rom.p)
    gammas = (rom.gamma_u, rom.gamma_d, rom.gamma_t)
    return modes, q, p, gammas


def build_basis(config: Config, snap: SnapshotSet | None, history: FomHistory | None = None,
                predictive_fields: FieldSnapshots | None = None,
                overrides: dict | None = None, seed: int | None = None) -> ManifoldBasis:
    """Construct the multi-field basis (plain, multi-state, or predictive).

    The multi-state route needs the run history for segmentation; the
    predictive route takes pre-assembled per-field snapshot matrices.
    """
    modes, q, p, gammas = _field_settings(config, overrides)
    bc_dofs = prescribed_dofs(config)
    mesh = config.make_mesh()
    tags = mesh.field_tags()

    if predictive_fields is not None:
        fields = zeroed_fields(predictive_fields, bc_dofs)
    else:
        if snap is None:
            raise InvalidInputError("snapshot set required to build a basis")
        fields = zeroed_fields(decompose_fields(snap), bc_dofs)

    multistate = (overrides or {}).get("multistate", config.rom.multistate)
    if multistate and predictive_fields is not None:
        raise InvalidInputError("multistate and predictive builds cannot be combined")

    field_bases = []
    if multistate:
        if history is None:
            raise InvalidInputError("multistate basis needs the run history for segmentation")
        seg = segment_states(history)
        seed0 = config.rom.seed if seed is None else seed
        linear_counts = (config.rom.k_e, config.rom.k_h, config.rom.k_s)
        nonlinear_counts = (0, 0, q)
        for fid, gamma in zip(_FIELDS, gammas):
            rows = free_field_rows(tags, fid, bc_dofs)
            matrix = fields.by_field(fid)
            state_mats, lin_eff, non_eff = _state_factors(
                matrix, rows, seg, linear_counts, nonlinear_counts)
            sv_full = np.linalg.svd(matrix[rows], compute_uv=False)
            fb = mf.merge_multistate(
                state_mats, lin_eff, non_eff,
                target_rank=sum(lin_eff) + sum(non_eff),
                oversample=config.rom.oversample, seed=seed0 + fid, field=fid,
                singular_values=sv_full)
            fb.gamma = gamma
            fb.xi = mf.compute_xi_field(fb, matrix, gamma, p)
            field_bases.append(fb)
        return assemble_global_basis(*field_bases, p=p)

    for fid, k_f, gamma in zip(_FIELDS, modes, gammas):
        rows = free_field_rows(tags, fid, bc_dofs)
        matrix = fields.by_field(fid)
        fb = build_field_basis(matrix, k_f, q, field=fid, rows=rows)
        fb.gamma = gamma
        fb.xi = mf.compute_xi_field(fb, matrix, gamma, p)
        field_bases.append(fb)
    return assemble_global_basis(*field_bases, p=p)


def _state_factors(matrix, rows, seg, linear_counts, nonlinear_counts):
    """Left factors of the trimmed state blocks, with counts capped to the
    columns each state can actually provide."""
    mats, lin_eff, non_eff = [], [], []
    for (lo, hi), k_x, q_x in zip(state_column_ranges(seg), linear_counts, nonlinear_counts):
        block = matrix[rows][:, lo:hi]
        if block.shape[1] == 0 or not np.any(block):
            mats.append(np.zeros((matrix.shape[0], 0)))
            lin_eff.append(0)
            non_eff.append(0)
            continue
        left, sv, _ = np.linalg.svd(block, full_matrices=False)
        n_cols = int(min(block.shape))
        padded = np.zeros((matrix.shape[0], n_cols))
        padded[rows] = left[:, :n_cols]
        mats.append(padded)
        k_eff = min(k_x, n_cols)
        q_eff = min(q_x, n_cols - k_eff)
        lin_eff.append(k_eff)
        non_eff.append(q_eff)
    return mats, tuple(lin_eff), tuple(non_eff)


def train_from_run(config: Config, history: FomHistory, basis: ManifoldBasis,
                   tau: float | None = None) -> tuple[TrainingSystem, EcswWeights]:
    mesh = config.make_mesh()
    stride = config.ecsw.train_stride
    steps = list(range(1, history.n_step + 1, stride))
    system = build_training_system(history, basis, mesh, config.material, steps)
    weights = train(system, config.ecsw.tau if tau is None else tau)
    return system, weights


def run_rom_to_dir(config: Config, basis: ManifoldBasis, weights: EcswWeights | None,
                   outdir) -> RomSolution:
    os.makedirs(outdir, exist_ok=True)
    mesh = config.make_mesh()
    sol = run_rom(mesh, config.material, config.loading, basis, weights,
                  tol=config.rom.tol, max_iter=config.rom.max_iter)
    if sol.n_step:
        matrix = np.column_stack(sol.solutions)
        snap = SnapshotSet(matrix=matrix, field_tags=mesh.field_tags())
        write_snapshots(snap, os.path.join(outdir, ROM_SNAPSHOTS))
    _write_rom_force(os.path.join(outdir, ROM_FORCE), sol)
    fom_mod.write_timings(os.path.join(outdir, ROM_TIMINGS),
                          sol.step_times_solve, sol.step_times_wall)
    return sol


def _write_rom_force(path, sol: RomSolution) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,u_prescribed,reaction\n")
        for j in range(sol.n_step):
            fh.write(f"{j + 1},{sol.u_prescribed[j]:.17g},{sol.reaction_force[j]:.17g}\n")


def compare_dirs(config: Config, fom_dir, rom_dir) -> MetricsReport:
    mesh = config.make_mesh()
    fom_snap = read_snapshots(os.path.join(fom_dir, RUN_SNAPSHOTS))
    rom_snap = read_snapshots(os.path.join(rom_dir, ROM_SNAPSHOTS))
    fom_solve, fom_wall = fom_mod.read_timings(os.path.join(fom_dir, RUN_TIMINGS))
    rom_solve, rom_wall = fom_mod.read_timings(os.path.join(rom_dir, ROM_TIMINGS))
    return compare_runs(mesh, fom_snap, rom_snap, fom_solve, fom_wall, rom_solve, rom_wall)


def combine_training_systems(a: TrainingSystem, b: TrainingSystem) -> TrainingSystem:
    if a.C.shape[1] != b.C.shape[1]:
        raise InvalidInputError("training systems cover different element counts")
    c = np.vstack([a.C, b.C])
    return TrainingSystem(C=c, d=c.sum(axis=1),
                          train_step_ids=a.train_step_ids + b.train_step_ids,
                          degenerate=a.degenerate and b.degenerate)


def predict_pipeline(config: Config, outdir, with_ecsw: bool = False,
                     overrides: dict | None = None):
    """Parameter-perturbed training runs, predictive basis, reduced rerun.

    Runs the +/-d% elastic-modulus full-order models, assembles the
    predictive snapshot set from their odd-step halves, builds the basis,
    optionally trains ECSW on the union of the training runs, and
    predicts the nominal loading. Returns the comparison metrics.
    """
    from .snapshots import assemble_predictive

    os.makedirs(outdir, exist_ok=True)
    d = config.predictive.deviation_percent / 100.0
    minus_cfg = config.with_elastic_scaled(1.0 - d)
    plus_cfg = config.with_elastic_scaled(1.0 + d)

    minus_hist, minus_snap = run_fom_to_dir(minus_cfg, os.path.join(outdir, "minus_run"))
    plus_hist, plus_snap = run_fom_to_dir(plus_cfg, os.path.join(outdir, "plus_run"))
    nominal_hist, nominal_snap = run_fom_to_dir(config, os.path.join(outdir, "fom_run"))
    for hist, name in ((minus_hist, "minus"), (plus_hist, "plus"), (nominal_hist, "nominal")):
        if hist.failed:
            raise InvalidInputError(f"{name} training run failed at step {hist.failure_step}")

    pred_fields = assemble_predictive(minus_snap, plus_snap)
    basis = build_basis(config, snap=None, predictive_fields=pred_fields, overrides=overrides)
    mf.write_basis(basis, os.path.join(outdir, "predictive.qmb"))

    weights = None
    if with_ecsw:
        mesh = config.make_mesh()
        stride = config.ecsw.train_stride
        sys_minus = build_training_system(
            minus_hist, basis, mesh, minus_cfg.material,
            list(range(1, minus_hist.n_step + 1, stride)))
        sys_plus = build_training_system(
            plus_hist, basis, mesh, plus_cfg.material,
            list(range(1, plus_hist.n_step + 1, stride)))
        combined = combine_training_systems(sys_minus, sys_plus)
        weights = train(combined, config.ecsw.tau)

    sol = run_rom_to_dir(config, basis, weights, os.path.join(outdir, "rom_run"))
    report = compare_dirs(config, os.path.join(outdir, "fom_run"), os.path.join(outdir, "rom_run"))
    write_metrics_csv(report, os.path.join(outdir, METRICS_FILE))
    return report, sol, basis

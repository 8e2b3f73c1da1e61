"""Command line driver wiring the reduction pipeline.

Stages communicate through files only; exit codes are 0 on success, 1
for usage errors, 2 for I/O or format problems, 3 for convergence
failures, and 4 for constraint violations such as a trained ECSW
residual ratio above its tolerance. QMROM_THREADS caps the BLAS thread
pool used by the vectorized element evaluation (0 means automatic).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import pipeline
from .config import parse_config
from .ecsw import read_weights, validate_weights, write_weights, write_weights_csv
from .errors import (
    ConfigError,
    ConstitutiveFailureError,
    EcswTrainingError,
    FormatError,
    InvalidInputError,
    NumericalFailureError,
    QmromError,
    ReducedSolverError,
    StepFailureError,
    TrainingDataError,
)
from .manifold import read_basis, write_basis
from .metrics import sv_report, write_metrics_csv, write_sv_csv
from .snapshots import read_snapshots

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_CONVERGENCE = 3
EXIT_CONSTRAINT = 4


def _apply_thread_cap() -> None:
    raw = os.environ.get("QMROM_THREADS", "")
    if not raw:
        return
    try:
        cap = int(raw)
    except ValueError:
        print(f"qmrom: ignoring non-integer QMROM_THREADS={raw!r}", file=sys.stderr)
        return
    if cap <= 0:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=cap)
    except ImportError:
        os.environ.setdefault("OMP_NUM_THREADS", str(cap))
        os.environ.setdefault("OPENBLAS_NUM_THREADS", str(cap))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmrom", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fom = sub.add_parser("fom", help="run the full-order bar and store snapshots")
    p_fom.add_argument("--config", required=True)
    p_fom.add_argument("--out", required=True)

    p_sv = sub.add_parser("sv-report", help="singular-value decay report")
    p_sv.add_argument("--snapshots", required=True)
    p_sv.add_argument("--out", required=True)

    p_basis = sub.add_parser("build-basis", help="build the quadratic-manifold basis")
    p_basis.add_argument("--config", required=True)
    p_basis.add_argument("--snapshots")
    p_basis.add_argument("--out", required=True)
    p_basis.add_argument("--k", type=int)
    p_basis.add_argument("--l", type=int)
    p_basis.add_argument("--m", type=int)
    p_basis.add_argument("--q", type=int)
    p_basis.add_argument("--p", type=int)
    p_basis.add_argument("--seed", type=int)
    p_basis.add_argument("--multistate", action="store_true")
    p_basis.add_argument("--run-dir", help="run directory with history (multistate)")
    p_basis.add_argument("--predictive", nargs=2, metavar=("MINUS", "PLUS"))

    p_train = sub.add_parser("train-ecsw", help="train the sparse element weighting")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--run-dir", required=True)
    p_train.add_argument("--basis", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--tau", type=float)

    p_rom = sub.add_parser("run-rom", help="run the hyperreduced model")
    p_rom.add_argument("--config", required=True)
    p_rom.add_argument("--basis", required=True)
    p_rom.add_argument("--weights")
    p_rom.add_argument("--out", required=True)

    p_cmp = sub.add_parser("compare", help="error and efficiency metrics")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--fom", required=True)
    p_cmp.add_argument("--rom", required=True)
    p_cmp.add_argument("--out", required=True)

    p_pred = sub.add_parser("predict-pipeline",
                            help="parameter-perturbed runs and predictive basis")
    p_pred.add_argument("--config", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument("--ecsw", action="store_true")
    return parser


def _cmd_fom(args) -> int:
    config = parse_config(args.config)
    history, _ = pipeline.run_fom_to_dir(config, args.out)
    if history.failed:
        print(f"qmrom: full-order run failed at step {history.failure_step}; "
              f"partial history written", file=sys.stderr)
        return EXIT_CONVERGENCE
    print(f"fom: {history.n_step} steps, peak |force| at step {history.peak_force_step}, "
          f"outputs in {args.out}")
    return EXIT_OK


def _cmd_sv_report(args) -> int:
    snap = read_snapshots(args.snapshots)
    report = sv_report(snap)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, pipeline.SV_REPORT_FILE)
    write_sv_csv(report, path)
    for name, idx in report.crossing.items():
        print(f"sv-report: {name} crosses 1e-6 at index {idx}")
    return EXIT_OK


def _cmd_build_basis(args) -> int:
    config = parse_config(args.config)
    overrides = {key: getattr(args, key) for key in ("k", "l", "m", "q", "p")
                 if getattr(args, key) is not None}
    if args.multistate:
        overrides["multistate"] = True
    if args.predictive and args.multistate:
        print("qmrom: --predictive and --multistate cannot be combined", file=sys.stderr)
        return EXIT_USAGE

    if args.predictive:
        from .snapshots import assemble_predictive

        minus = read_snapshots(args.predictive[0])
        plus = read_snapshots(args.predictive[1])
        fields = assemble_predictive(minus, plus)
        basis = pipeline.build_basis(config, snap=None, predictive_fields=fields,
                                     overrides=overrides, seed=args.seed)
    else:
        if not args.snapshots:
            print("qmrom: --snapshots is required without --predictive", file=sys.stderr)
            return EXIT_USAGE
        snap = read_snapshots(args.snapshots)
        history = None
        if args.multistate:
            run_dir = args.run_dir or os.path.dirname(os.path.abspath(args.snapshots))
            history, _ = pipeline.load_fom_run(config, run_dir)
        basis = pipeline.build_basis(config, snap, history=history,
                                     overrides=overrides, seed=args.seed)
    write_basis(basis, args.out)
    k, l, m = basis.mode_counts
    print(f"build-basis: k={k} l={l} m={m} q={basis.u.q} p={basis.p} -> {args.out}")
    return EXIT_OK


def _cmd_train_ecsw(args) -> int:
    config = parse_config(args.config)
    if args.tau is not None:
        config = dataclasses.replace(config, ecsw=dataclasses.replace(config.ecsw, tau=args.tau))
    history, _ = pipeline.load_fom_run(config, args.run_dir)
    basis = read_basis(args.basis)
    system, weights = pipeline.train_from_run(config, history, basis)
    report = validate_weights(system, weights)
    write_weights(weights, args.out)
    write_weights_csv(weights, args.out + ".csv")
    print(f"train-ecsw: selected {weights.n_s}/{report.n_elements} elements, "
          f"ratio {report.ratio:.3e} (tau {weights.tau:.3e})")
    if not report.passed:
        print("qmrom: trained weights violate the tolerance", file=sys.stderr)
        return EXIT_CONSTRAINT
    return EXIT_OK


def _cmd_run_rom(args) -> int:
    config = parse_config(args.config)
    basis = read_basis(args.basis)
    weights = read_weights(args.weights) if args.weights else None
    sol = pipeline.run_rom_to_dir(config, basis, weights, args.out)
    if sol.failed:
        print(f"qmrom: reduced run failed at step {sol.failure_step}; partial "
              f"solution written", file=sys.stderr)
        return EXIT_CONVERGENCE
    print(f"run-rom: {sol.n_step} steps, outputs in {args.out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    config = parse_config(args.config)
    report = pipeline.compare_dirs(config, args.fom, args.rom)
    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv(report, os.path.join(args.out, pipeline.METRICS_FILE))
    print(f"compare: eps_r(u)={report.eps_r_u:.3e} eps_r(theta)={report.eps_r_theta:.3e} "
          f"eps_a(damage)={report.eps_a_damage:.3e} eta_s={report.eta_s.aggregate:.3f} "
          f"eta_w={report.eta_w.aggregate:.3f}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    config = parse_config(args.config)
    report, sol, _ = pipeline.predict_pipeline(config, args.out, with_ecsw=args.ecsw)
    if sol.failed:
        print(f"qmrom: predictive reduced run failed at step {sol.failure_step}",
              file=sys.stderr)
        return EXIT_CONVERGENCE
    print(f"predict-pipeline: eps_a(damage)={report.eps_a_damage:.3e} -> {args.out}")
    return EXIT_OK


_HANDLERS = {
    "fom": _cmd_fom,
    "sv-report": _cmd_sv_report,
    "build-basis": _cmd_build_basis,
    "train-ecsw": _cmd_train_ecsw,
    "run-rom": _cmd_run_rom,
    "compare": _cmd_compare,
    "predict-pipeline": _cmd_predict,
}


def dispatch(argv) -> int:
    """Parse argv and run one pipeline stage, mapping errors to exit codes."""
    _apply_thread_cap()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, FormatError, OSError) as exc:
        print(f"qmrom: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (StepFailureError, ConstitutiveFailureError, ReducedSolverError,
            NumericalFailureError, TrainingDataError) as exc:
        print(f"qmrom: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except EcswTrainingError as exc:
        print(f"qmrom: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (InvalidInputError, QmromError) as exc:
        print(f"qmrom: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

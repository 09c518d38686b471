"""Command-line front end.

Exit codes: 0 success, 1 validation error (bad arguments, config, mesh or
input files), 2 numerical failure (blow-up, solver failure, ill-conditioned
reduced systems).  Diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS")

CONFIG_HELP = """\
configuration file (INI):
  [case]   case = manufactured | cavity (required), n = <subdivisions> (required),
           output = out, dump_times = <t_end>
  [fluid]  rho = 1, mu = 0.01, diffusivity = 0 (manufactured) | 0.01 (cavity)
  [time]   cfl = 1, t_end = 2.5 | 5, snapshot_interval = 0.01, tolerance = 1e-10
  [pod]    kappa_wu = 0.99999 | 0.9999, kappa_pi = 0.9999 | 0.99, kappa_y = 0.9999
  [rom]    dt_divisor = 50, ablate_pressure = false,
           method = consistent | derivative, dissipation = exact | frozen
"""


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on worker threads (default: machine parallelism)")
    common.add_argument("--tolerance", type=float, default=None,
                        help="linear solver tolerance (default 1e-10)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(
        prog="hfvrom", description="Hybrid FV/FE solver with a POD-Galerkin reduced model.",
        epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-gen", parents=[common], help="write a cube mesh")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    def with_config(name, helptext, snapshots=False):
        p = sub.add_parser(name, parents=[common], help=helptext, epilog=CONFIG_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", type=Path, required=True)
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (overrides [case] output)")
        if snapshots:
            p.add_argument("--snapshots", type=Path, default=None,
                           help="snapshot file (default: <output>/snapshots.hfv)")
        return p

    with_config("fom-run", "run the full order model; writes snapshots and field dumps")
    p = with_config("pod-build", "build POD bases and the eigenvalue table", snapshots=True)
    with_config("rom-offline", "assemble reduced operators", snapshots=True)
    with_config("rom-run", "integrate the reduced model; writes coefficients and dumps",
                snapshots=True)
    p = with_config("compare", "write the error report", snapshots=True)
    p.add_argument("--ablate-pressure", action="store_true",
                   help="report a run with the pressure coupling removed")
    with_config("pipeline", "run every stage")
    return parser


def _limit_threads(k):
    if k is None:
        return
    if k < 1:
        raise ValueError("--threads must be >= 1")
    # numerical libraries are imported after this point, so the BLAS pools
    # pick the cap up at load time
    for var in THREAD_VARS:
        os.environ[var] = str(k)


def _dispatch(args):
    from . import pipeline
    from .config import load_config

    if args.command == "mesh-gen":
        pipeline.run_mesh_gen(args.n, args.out)
        return
    cfg = load_config(args.config)
    if args.tolerance is not None:
        if not args.tolerance > 0:
            raise ValueError("--tolerance must be positive")
        cfg = cfg.with_overrides(tolerance=args.tolerance)
    if args.out is not None:
        cfg = cfg.with_overrides(output=args.out)
    snaps = getattr(args, "snapshots", None)
    if args.command == "fom-run":
        pipeline.run_fom_files(cfg)
    elif args.command == "pod-build":
        pipeline.run_pod_files(cfg, snaps)
    elif args.command == "rom-offline":
        pipeline.run_offline_files(cfg, snaps)
    elif args.command == "rom-run":
        pipeline.run_online_files(cfg, snaps)
    elif args.command == "compare":
        report = pipeline.run_compare_files(cfg, snaps, ablate=args.ablate_pressure)
        _summary(report)
    elif args.command == "pipeline":
        _summary(pipeline.run_pipeline(cfg))


def _summary(report):
    for name in sorted(report.columns):
        print(f"mean {name} = {report.mean(name):.6g}", file=sys.stderr)


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _limit_threads(args.threads)
        from .errors import (DegenerateSnapshots, HfvError, IllConditionedBasis,
                             NumericalBlowup, SolverFailure, ZeroReference)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    numerical = (NumericalBlowup, SolverFailure, IllConditionedBasis, DegenerateSnapshots,
                 ZeroReference)
    try:
        _dispatch(args)
    except numerical as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (HfvError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

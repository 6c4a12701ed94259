"""Command line interface.

Subcommands:
  run <config.json> --out <dir>       run an experiment, write reports/figures
  quality <mesh.msh> [--bins N]       print a cell-quality summary of a mesh
  compare-direct <config.json> --cycles K
                                      error of the K-cycle iterate vs a direct solve

Exit codes: 0 on success/convergence, 2 when a run fails to converge,
1 on any error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .experiments import ExperimentConfig, compare_to_direct, emit, run
from .mesh import quality_report
from .msh_io import read_msh


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simplexmg",
        description="finite element multigrid experiments on simplicial meshes")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="path to a JSON experiment config")
    p_run.add_argument("--out", required=True, help="output directory for reports")

    p_quality = sub.add_parser("quality", help="report cell quality of a mesh")
    p_quality.add_argument("mesh", help="path to an MSH 2.2 ASCII file")
    p_quality.add_argument("--bins", type=int, default=20)
    p_quality.add_argument("--threshold", type=float, default=0.1,
                           help="gamma threshold for the low-quality cell count")

    p_cmp = sub.add_parser("compare-direct",
                           help="compare k multigrid cycles against a direct solve")
    p_cmp.add_argument("config", help="path to a JSON experiment config")
    p_cmp.add_argument("--cycles", type=int, required=True)
    return parser


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    report = run(config)
    paths = emit(report, args.out)
    final = report.residual_history[-1]
    iterations = len(report.residual_history) - 1
    if report.converged:
        print(f"converged in {report.iterations_to_rtol} iterations "
              f"(relative residual {final:.3e})")
    else:
        print(f"NOT converged after {iterations} iterations "
              f"(relative residual {final:.3e})")
    for name in ("residuals", "quality", "summary", "residual_plot", "quality_plot"):
        print(f"  wrote {paths[name]}")
    return 0 if report.converged else 2


def _cmd_quality(args) -> int:
    mesh = read_msh(args.mesh)
    report = quality_report(mesh, bins=args.bins)
    n_low = int(np.sum(report.per_cell_gamma < args.threshold))
    print(f"cells: {mesh.n_cells}  vertices: {mesh.n_vertices}  dim: {mesh.dim}")
    print(f"gamma_min: {report.gamma_min:.6e}")
    print(f"cells below {args.threshold:g}: {n_low}")
    for k in range(args.bins):
        lo, hi = report.bin_edges[k], report.bin_edges[k + 1]
        print(f"  ({lo:.3f}, {hi:.3f}]: {int(report.histogram[k])}")
    return 0


def _cmd_compare_direct(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    error = compare_to_direct(config, args.cycles)
    print(f"solution error vs direct solve after {args.cycles} cycles: {error:.6e}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "quality":
            return _cmd_quality(args)
        return _cmd_compare_direct(args)
    except Exception as err:  # surface a one-line diagnostic, exit code 1
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

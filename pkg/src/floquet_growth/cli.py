"""Command line entry point ``floquet-growth``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import bench
from . import discrete_limit as dl
from .exact_models import counterexample_surface
from .model_core import Grid, load_model
from .pde_solver import FloquetError, NonConvergedError, adjoint_floquet, floquet_eigen


def _emit(rows, columns, fmt: str, output: Optional[str], meta: Optional[dict] = None) -> None:
    text = bench.rows_to_json(rows, meta) if fmt == "json" else bench.rows_to_csv(rows, columns)
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _pair(s: str):
    parts = s.replace(",", " ").split()
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {s!r}")
    return float(parts[0]), float(parts[1])


def _floats(s: str) -> List[float]:
    return [float(v) for v in s.replace(",", " ").split()]


def cmd_run(args) -> int:
    spec = bench.ExperimentSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    res = bench.run_experiment(spec, args.out_dir)
    for f in res.files:
        print(f)
    return res.status


def cmd_staircase(args) -> int:
    pts = bench.a_sweep(args.a_min, args.a_max, args.step, args.exact_edges)
    rows = [dl.staircase(a, args.tau, args.T).row() for a in pts]
    cols = ["a", "N_a", "p_a", "lambda_inf", "a_l", "a_r", "rate_bound"]
    _emit(rows, cols, args.format, args.output, {"tau": args.tau, "T": args.T})
    return 0


def cmd_eigen(args) -> int:
    kernel, grid = load_model(json.loads(Path(args.model).read_text(encoding="utf-8")))
    if args.dx is not None:
        steps = round(grid.period / args.dx)
        if abs(steps * args.dx - grid.period) > 1e-9 * grid.period:
            raise ValueError("--dx must divide the period")
        grid = Grid.from_period(grid.period, steps, grid.x_max, a=kernel.a)
    status = 0
    try:
        r = floquet_eigen(kernel, grid, tol=args.tol, max_iter=args.max_iter, store_profile=args.adjoint,
                          method=args.method)
        row = {"lambda": r.lam, "residual": r.residual, "iterations": r.iterations,
               "lost_fraction": r.lost_fraction, "dx": grid.dx, "status": "ok"}
        if args.adjoint:
            ad = adjoint_floquet(kernel, grid, args.tol, args.max_iter, direct=r, method=args.method)
            d = ad.duality()
            row.update({"lambda_adjoint": ad.lambda_check, "duality_min": float(d.min()),
                        "duality_max": float(d.max())})
    except NonConvergedError as e:
        row = {"lambda": e.lam, "residual": e.residual, "iterations": e.max_iter, "dx": grid.dx,
               "status": "non_converged"}
        status = 1
    except FloquetError as e:
        row = {"lambda": None, "dx": grid.dx, "status": f"error: {e}"}
        status = 1
    _emit([row], list(row), args.format, args.output, {"model": kernel.to_dict()})
    return status


def cmd_counterexample(args) -> int:
    s = counterexample_surface(args.a1, args.a2, args.b1_range, args.b2_range, args.resolution, args.alpha)
    rows = [{"b1": float(x), "b2": float(y), "lambda": float(s.lam[i, j])}
            for i, x in enumerate(s.b1) for j, y in enumerate(s.b2)]
    _emit(rows, ["b1", "b2", "lambda"], args.format, args.output, {"a1": args.a1, "a2": args.a2, "alpha": args.alpha})
    return 0


def cmd_limits(args) -> int:
    tab = bench.noncommuting_limits_probe(args.a, args.tau, args.T, args.eps, args.kappa,
                                          args.steps_per_period, args.x_max, args.tol)
    _emit(tab.rows(), ["eps", "kappa", "lambda", "status"], args.format, args.output, tab.summary())
    if args.format == "csv" and not args.output:
        for k, v in tab.summary().items():
            print(f"# {k} = {bench.format_cell(v)}", file=sys.stderr)
    return 0 if all(s == "ok" for row in tab.status for s in row) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="floquet-growth", description="Growth rates of periodically forced dividing populations.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def outputs(sp):
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--output", "-o", help="write here instead of stdout")

    sp = sub.add_parser("run", help="run an experiment spec (JSON)")
    sp.add_argument("spec")
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("staircase", help="tabulate the large-rate limit over majority ages")
    sp.add_argument("--tau", required=True)
    sp.add_argument("--T", default="1")
    sp.add_argument("--a-min", default="0.005")
    sp.add_argument("--a-max", default="1.2")
    sp.add_argument("--step", default="0.005")
    sp.add_argument("--exact-edges", action="store_true", help="evaluate exactly on rational grid points")
    outputs(sp)
    sp.set_defaults(func=cmd_staircase)

    sp = sub.add_parser("eigen", help="Floquet eigenvalue of a model file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dx", type=float)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--max-iter", type=int, default=10_000)
    sp.add_argument("--method", choices=("auto", "power", "arnoldi"), default="auto",
                    help="eigen solver route (auto: power iteration with Arnoldi fallback)")
    sp.add_argument("--adjoint", action="store_true", help="also compute the adjoint eigenfunction")
    outputs(sp)
    sp.set_defaults(func=cmd_eigen)

    sp = sub.add_parser("counterexample", help="two-phase model growth rate over (b1, b2)")
    sp.add_argument("--a1", type=float, default=10.0)
    sp.add_argument("--a2", type=float, default=0.1)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--b1-range", type=_pair, default=(0.0, 5.0))
    sp.add_argument("--b2-range", type=_pair, default=(0.0, 5.0))
    sp.add_argument("--resolution", type=int, default=51)
    outputs(sp)
    sp.set_defaults(func=cmd_counterexample)

    sp = sub.add_parser("limits-probe", help="growth rate over an (eps, kappa) table")
    sp.add_argument("--a", type=float, default=0.22)
    sp.add_argument("--tau", default="0.6")
    sp.add_argument("--T", default="1")
    sp.add_argument("--eps", type=_floats, default=[1e-4, 1e-2, 0.2])
    sp.add_argument("--kappa", type=_floats, default=[50.0, 100.0, 200.0])
    sp.add_argument("--steps-per-period", type=int, default=1000)
    sp.add_argument("--x-max", type=float)
    sp.add_argument("--tol", type=float, default=1e-10)
    outputs(sp)
    sp.set_defaults(func=cmd_limits)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as e:
        print(f"floquet-growth: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

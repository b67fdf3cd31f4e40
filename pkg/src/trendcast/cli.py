"""Command-line entry points: filter, synth, run, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import SynthSpec, UnparseableNumberError, synth_generate, write_csv
from .experiment import (apply_overrides, emit_plot_data, emit_report,
                         load_config, render_tables, report_from_dict,
                         resolve_output_dir, run_experiment)
from .l1tf import l1_trend_filter


def _read_single_column(path: Path) -> np.ndarray:
    """Read a one-column CSV of values; a non-numeric first row is a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and r[0].strip() != ""]
    if not rows:
        raise UnparseableNumberError(f"{path}: no values")
    start = 0
    try:
        float(rows[0][0])
    except ValueError:
        start = 1
    values = []
    for i, row in enumerate(rows[start:], start=start + 1):
        try:
            values.append(float(row[0]))
        except ValueError:
            raise UnparseableNumberError(f"{path}: bad number {row[0]!r} at row {i}") from None
    return np.asarray(values)


def cmd_filter(args) -> int:
    y = _read_single_column(Path(args.input))
    sol = l1_trend_filter(y, args.lam, tolerance=args.tolerance,
                          max_iterations=args.max_iterations)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("t,y,x,residual\n")
        for t, (yt, xt, rt) in enumerate(zip(y, sol.x, sol.residual)):
            fh.write(f"{t},{yt!r},{xt!r},{rt!r}\n")
    status = "converged" if sol.converged else "NOT converged"
    print(f"filtered {y.size} points (lam={args.lam}): {status} after "
          f"{sol.iterations} iterations, kkt residual {sol.kkt_residual:.2e}")
    print(f"wrote {out}")
    return 0 if sol.converged else 1


def cmd_synth(args) -> int:
    coupling = tuple(float(v) for v in args.coupling.split(",")) if args.coupling else ()
    spec = SynthSpec(length=args.length, n_drivers=args.n_drivers,
                     knot_count=args.knots, noise_std=args.noise_std,
                     trend_slope_range=(args.slope_min, args.slope_max),
                     driver_coupling=coupling, seed=args.seed,
                     base_level=args.base_level)
    path = write_csv(synth_generate(spec), args.output)
    print(f"wrote {path}")
    return 0


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.set:
        config = apply_overrides(config, args.set)
    if args.seed is not None:
        config = apply_overrides(config, [f"training.seed={args.seed}"])
    report = run_experiment(config)
    outdir = resolve_output_dir(args.output_dir, config.output_dir)
    written = emit_report(report, outdir)
    written += emit_plot_data(report, outdir)
    sys.stdout.write(render_tables(report))
    print(f"wrote {len(written)} files to {outdir}")
    return 0


def cmd_report(args) -> int:
    report = report_from_dict(json.loads(Path(args.input).read_text()))
    text = render_tables(report)
    sys.stdout.write(text)
    if args.output_dir:
        outdir = resolve_output_dir(args.output_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "report.txt").write_text(text)
        print(f"wrote {outdir / 'report.txt'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trendcast",
        description="Trend-filtered forecasting experiments: filter a series, "
                    "generate synthetic data, run the model matrix, re-render reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_filter = sub.add_parser("filter", help="trend-filter a single-column CSV")
    p_filter.add_argument("--input", required=True, help="CSV with one value column")
    p_filter.add_argument("--output", required=True, help="destination t,y,x,residual CSV")
    p_filter.add_argument("--lam", type=float, default=0.005, help="penalty weight")
    p_filter.add_argument("--tolerance", type=float, default=1e-8)
    p_filter.add_argument("--max-iterations", type=int, default=200)
    p_filter.set_defaults(func=cmd_filter)

    p_synth = sub.add_parser("synth", help="emit a synthetic series CSV")
    p_synth.add_argument("--output", required=True)
    p_synth.add_argument("--length", type=int, default=2000)
    p_synth.add_argument("--n-drivers", type=int, default=2)
    p_synth.add_argument("--knots", type=int, default=5)
    p_synth.add_argument("--noise-std", type=float, default=1.0)
    p_synth.add_argument("--slope-min", type=float, default=-1.0)
    p_synth.add_argument("--slope-max", type=float, default=1.0)
    p_synth.add_argument("--coupling", default="", help="comma-separated driver weights")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--base-level", type=float, default=100.0)
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run the experiment matrix from a YAML config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key, e.g. training.epochs=5")
    p_run.add_argument("--seed", type=int, help="shorthand for training.seed")
    p_run.add_argument("--output-dir", help="defaults to config output_dir, then "
                                            "$TRENDCAST_OUT, then ./trendcast_out")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="re-render a saved report.json")
    p_report.add_argument("--input", required=True)
    p_report.add_argument("--output-dir")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

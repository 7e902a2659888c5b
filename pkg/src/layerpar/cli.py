"""Command-line entry point: ``layerpar run|compare|plot|grad-check``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import (ConfigError, RunConfig, SchemaError, compare_runs, format_comparison, run_experiment,
                      write_comparison)
from .parallel import NumericalDivergence

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_TESTS = 3

log = logging.getLogger("layerpar")


def _run(args) -> int:
    cfg = RunConfig.from_file(args.config)
    log.info("running %s (K=%d) into %s", cfg.mode, cfg.effective_K, cfg.output_dir)
    summary = run_experiment(cfg, log=log.info)
    final = summary.get("final", {})
    print(f"{cfg.mode}: test_accuracy={final.get('test_accuracy')} "
          f"violation_mean={final.get('violation_mean')} -> {cfg.output_dir}")
    if "speedup" in summary:
        sp = summary["speedup"]
        print(f"predicted speedup {sp['predicted']:.3f} (bound {sp['upper_bound']})"
              + (f", measured {sp['measured']:.3f}" if "measured" in sp else ""))
    return EXIT_OK


def _compare(args) -> int:
    report = compare_runs(args.runs)
    print(format_comparison(report))
    if args.out:
        write_comparison(report, args.out)
    return EXIT_OK


def _plot(args) -> int:
    from .plotting import render_curves

    fields = [f.strip() for f in args.fields.split(",") if f.strip()]
    for path in render_curves(args.metrics, fields, args.out_dir):
        print(path)
    return EXIT_OK


def _grad_check(args) -> int:
    from .gradcheck import run_suite

    seed = 0
    if args.config:
        seed = RunConfig.from_file(args.config).seed
    results = run_suite(seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  rel_err={r.rel_err:.2e}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_OK if failed == 0 else EXIT_TESTS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerpar", description="Layer-parallel residual network experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train according to a run configuration file")
    p.add_argument("config", help="key = value configuration file")
    p.set_defaults(func=_run)

    p = sub.add_parser("compare", help="tabulate finished runs against the first one")
    p.add_argument("runs", nargs="+", help="run directories; the first is the baseline")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=_compare)

    p = sub.add_parser("plot", help="render learning curves from a metrics file")
    p.add_argument("metrics", help="metrics.csv written by a run")
    p.add_argument("--fields", required=True, help="comma-separated metric columns")
    p.add_argument("--out-dir", help="directory for the SVG files (default: next to the metrics)")
    p.set_defaults(func=_plot)

    p = sub.add_parser("grad-check", help="finite-difference check of every analytic gradient")
    p.add_argument("config", nargs="?", help="optional run configuration (its seed is used)")
    p.set_defaults(func=_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalDivergence as exc:
        print(f"numerical divergence: {exc} (epoch {exc.epoch}, stage {exc.stage})", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``minidisc <subcommand> --config PATH [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import BASELINE_METHODS, ConfigError, load_config, with_overrides
from .experiment import prepare, replot, run_experiment, write_report

STAGE_METHODS = {"minidisc": ["minidisc"], "maxidisc": ["maxidisc"],
                 "baselines": list(BASELINE_METHODS)}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="experiment JSON file")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, metavar="N", help="run only this seed")
    common.add_argument("--method", action="append", metavar="NAME",
                        help="restrict to a method; repeatable")
    common.add_argument("--lambda", dest="lam", type=float, metavar="F", help="tradeoff lambda")
    common.add_argument("--eta", type=int, metavar="N", help="candidates sampled per sandwich step")
    common.add_argument("--grid", type=int, metavar="N", help="grid count n")
    common.add_argument("--selection", choices=("lambda", "nd"), help="tradeoff used for selection")
    common.add_argument("--residual", action="store_true", help="add residual distillation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="minidisc", description="Teacher-assistant scheduling experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="train (or reuse) teachers")
    sub.add_parser("grid", parents=[common], help="score importance and write candidate grids")
    sub.add_parser("minidisc", parents=[common], help="run MiniDisc")
    sub.add_parser("maxidisc", parents=[common], help="run the enumeration baseline")
    sub.add_parser("baselines", parents=[common], help="run direct KD, fixed TA and finetune-only")
    sub.add_parser("run", parents=[common], help="run every configured method")
    sub.add_parser("report", parents=[common], help="write the ledger report from finished runs")
    sub.add_parser("plot", parents=[common], help="redraw charts from the CSV files")
    return p


def _methods(args) -> list[str] | None:
    stage = STAGE_METHODS.get(args.command)
    if args.method:
        if stage is not None and not set(args.method) <= set(stage):
            raise ConfigError([f"--method: {args.method} not valid for '{args.command}' "
                               f"(choose from {stage})"])
        return args.method
    return stage


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = with_overrides(load_config(args.config), lam=args.lam, eta=args.eta, n=args.grid,
                             selection=args.selection, residual=args.residual, seed=args.seed,
                             out_dir=args.out)
        methods = _methods(args)
        if methods is not None and args.command == "run":
            cfg = with_overrides(cfg, methods=methods)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2

    if args.command in ("train-teacher", "grid"):
        info = prepare(cfg, "teacher" if args.command == "train-teacher" else "grid")
        print(json.dumps(info, indent=1))
        return 0
    if args.command == "report":
        rows = write_report(cfg.out_dir, cfg)
        if not rows:
            print("no finished runs found", file=sys.stderr)
            return 1
        for r in rows:
            ratio = "" if r["steps_vs_kd"] is None else f"{r['steps_vs_kd']:.2f}x"
            print(f"{r['method']:<9} steps={r['total_steps']:<8} trials={r['total_trials']:<5} "
                  f"selection_trials={r['selection_trials']:<4} vs_kd={ratio}")
        return 0
    if args.command == "plot":
        for p in replot(cfg.out_dir):
            print(p)
        return 0

    result = run_experiment(cfg, methods=methods)
    for r in result.rows:
        print(f"{r['task']:<24} seed={r['seed']} {r['method']:<9} metric={r['metric']:.4f}")
    for f in result.failures:
        print(f"FAILED {f['task']} seed={f['seed']} {f['stage']}: {f['error']}", file=sys.stderr)
    return 1 if result.failures else 0


if __name__ == "__main__":
    sys.exit(main())

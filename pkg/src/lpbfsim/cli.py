"""Command-line entry point: run / study / compare an experiment config."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_config
from .runner import run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lpbfsim",
        description="Two-level multiscale thermal simulator for laser powder bed fusion",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, hint in (
        ("run", "run the config's own experiment mode"),
        ("study", "convergence study: reference plus a macro/micro step sweep"),
        ("compare", "multirate vs uniform-step timing comparison"),
    ):
        s = sub.add_parser(name, help=hint)
        s.add_argument("config", type=Path, help="experiment config file")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        s.add_argument("--snapshots", choices=("all", "macro", "none"), default=None,
                       help="field snapshot cadence (default from the config)")
        s.add_argument("--threads", type=int, default=1,
                       help="concurrent runs in study sweeps")
        s.add_argument("--strict-paper", action="store_true",
                       help="use the printed literature constants "
                            "(Stefan-Boltzmann 5.87e-8, 2D scan speed 0.01 mm/s)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, strict_paper=args.strict_paper)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "study":
        cfg = replace(cfg, mode="convergence-study")
    elif args.command == "compare":
        cfg = replace(cfg, mode="compare")
    art = run_experiment(cfg, args.out, snapshots=args.snapshots, threads=args.threads)
    summary = art.summary or {}
    for key in ("mode", "speedup", "total_seconds"):
        if key in summary:
            print(f"{key}: {summary[key]}")
    print(f"outputs in {art.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

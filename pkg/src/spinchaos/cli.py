"""Command line entry point: one subcommand per experiment, plus run-all."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as cfgmod
from .experiments import EXPERIMENTS, run_all, run_experiment
from .model import default_params

SUBCOMMANDS = ("simulate", "solve-limit", "rate", "concentration", "universality", "averaged-check",
               "kernel-check", "u0-exact")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed (unsigned 64-bit)")
    p.add_argument("--out", default=None, help="directory for reports and data files")
    p.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores")
    p.add_argument("--format", choices=("csv", "json"), default="json", dest="fmt")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinchaos", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", default=None, help="INI file with model and [experiment] sections")
        _common(p)
    p = sub.add_parser("run-all", help="run every config in order; nonzero exit iff any check fails")
    p.add_argument("configs", nargs="*", help="INI files, each naming its experiment in [experiment] name")
    _common(p)
    return parser


def _threads(n: int) -> int:
    if n < 0:
        raise ValueError("--threads must be nonnegative")
    return n or os.cpu_count() or 1


def _seed(s: int) -> int:
    if not 0 <= s < 2**64:
        raise ValueError("--seed must be an unsigned 64-bit integer")
    return s


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args.threads)
        seed = _seed(args.seed)
        if args.command == "run-all":
            configs = [cfgmod.load_experiment(path, seed=seed) for path in args.configs]
            summary, code = run_all(configs, threads, args.out, args.fmt)
            for row in summary["rows"]:
                print(f"{'PASS' if row['passed'] else 'FAIL'} {row['experiment']}")
            return code
        if args.config:
            cfg = cfgmod.load_experiment(args.config, args.command, seed)
        else:
            cfg = cfgmod.ExperimentConfig(args.command, default_params(EXPERIMENTS[args.command].potential), {}, seed)
        report = run_experiment(cfg, threads, args.out, args.fmt)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"spinchaos: error: {exc}", file=sys.stderr)
        return 2
    if args.out is None:
        print(report.to_json())
    else:
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {report.experiment} -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

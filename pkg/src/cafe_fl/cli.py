"""Command line: ``cafe-fl validate|run|report``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import parse_config
from .errors import CafeError, ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafe-fl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file and print every problem")
    p.add_argument("--config", required=True)

    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed-override", type=int, help="run only this seed")

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True, help="table file; a .json twin is written next to it")
    p.add_argument("--baseline", help="run directory used as the FATE baseline (default: first)")
    p.add_argument("--fate-metric", choices=("f1", "accuracy"), default="f1")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command in ("validate", "run"):
        try:
            cfg = parse_config(args.config)
        except ConfigError as exc:
            for problem in exc.problems:
                print(f"config error: {problem}", file=sys.stderr)
            return 1
        if args.command == "validate":
            print(f"ok: {args.config} (hash {cfg.config_hash()[:12]})")
            return 0
        from .runner import run

        return run(cfg, args.out, args.seed_override)

    from .runner import report

    try:
        report(args.run_dirs, args.out, args.baseline, args.fate_metric)
    except (CafeError, OSError, ValueError) as exc:
        print(f"report failed: {exc}", file=sys.stderr)
        return 2
    with open(args.out) as fh:
        sys.stdout.write(fh.read())
    return 0


if __name__ == "__main__":
    sys.exit(main())

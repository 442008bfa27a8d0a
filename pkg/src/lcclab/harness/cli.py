"""Command-line entry point: ``lcclab <subcommand> [--config f] [--seed n] [--out d]``.

Every pipeline subcommand runs the stages it needs (reusing cached ones)
and prints the directory of its own artifacts.  On failure the failing
stage is named on stderr and the exit status is 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import StageError, format_report, run_pipeline, sweep

PIPELINE_COMMANDS = ("train", "prune", "capture", "decompose", "probe", "compensate", "fold", "eval")


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the pipeline seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="lcclab", description="Pruned-model recovery by lost component compensation.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in PIPELINE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the pipeline through the {name} stage")
    sp = sub.add_parser("sweep", parents=[common], help="rerun the pipeline over values of one setting")
    sp.add_argument("--axis", required=True, choices=("k", "head_fraction"))
    sp.add_argument("--values", required=True, type=_parse_values, help="comma-separated values, e.g. 1,3,10")
    sub.add_parser("report", parents=[common], help="run everything and print the summary table")
    return ap


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    return dataclasses.replace(cfg, **changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    say = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"lcclab: stage 'config' failed: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "sweep":
            rows = sweep(cfg, args.axis, args.values, logger=say)
            print(f"{args.axis:>8} {'accuracy':>9} {'perplexity':>11} {'overhead':>10}")
            for r in rows:
                print(f"{r['value']!s:>8} {r['accuracy']:>9.4f} {r['perplexity']:>11.4f} {r['max_overhead']:>10.6f}")
        elif args.command == "report":
            pipe = run_pipeline(cfg, logger=say)
            res = pipe.results["eval"]
            print(format_report(res.value), end="")
            print(res.dir / "report.json")
        else:
            pipe = run_pipeline(cfg, until=args.command, logger=say)
            res = pipe.results[args.command]
            if args.command == "eval":
                print(json.dumps({k: res.value[k] for k in ("accuracy", "perplexity", "gap_recovered")}, sort_keys=True))
            print(res.dir)
    except StageError as exc:
        print(f"lcclab: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"lcclab: stage {args.command!r} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 2 scenario error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import runner
from .scenario import ScenarioError, load_scenario, with_overrides

STAGES = {
    "simulate-orbit": ("orbit",),
    "simulate-qkd": ("orbit", "qkd"),
    "simulate-timetransfer": ("timetransfer",),
    "run-usecase": ("orbit", "qkd", "timetransfer", "transfer"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdtime", description="Quantum-secured time-transfer simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "validate-scenario"):
        p = sub.add_parser(name)
        p.add_argument("--scenario", default="paper-baseline",
                       help="scenario file (.json/.toml) or shipped name")
        p.add_argument("--output", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--step", type=float, help="override sim.step_s")
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                       help="expectation counts instead of Poisson sampling")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scn = load_scenario(args.scenario)
        scn = with_overrides(scn, run__seed=args.seed, sim__step_s=args.step,
                             run__deterministic=args.deterministic)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate-scenario":
        print(scn.to_json())
        return 0
    try:
        result = runner.run_usecase(scn, STAGES[args.command])
        out = runner.write_outputs(result, args.output)
    except (runner.StageError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(runner.summary(result), indent=2, sort_keys=True))
    print(f"wrote {out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``knd-sim`` command line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from kndsim import harness
from kndsim.scenario import SEED_MAX, ScenarioError, load_scenario

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knd-sim", description="Topology-aware network driver simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write CSV reports")
    run.add_argument("scenario", help="scenario file, or a bundled name such as aligned-a4")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--replications", type=int, help="override perf.replications")
    run.add_argument("--out", default=None, help="output directory (default: ./out/<scenario name>)")
    run.add_argument("--jobs", type=int, default=1, help="worker processes (output is identical)")

    cmp_ = sub.add_parser("compare", help="compare two report directories (speedup of A over B)")
    cmp_.add_argument("report_a")
    cmp_.add_argument("report_b")

    val = sub.add_parser("validate", help="validate a scenario file")
    val.add_argument("scenario")
    return parser


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        if not 0 <= args.seed <= SEED_MAX:
            raise ScenarioError("seed must be an unsigned 64-bit integer", "--seed")
        scenario = dataclasses.replace(scenario, seed=args.seed)
    if args.replications is not None:
        if args.replications < 0:
            raise ScenarioError("replications must be >= 0", "--replications")
        scenario = dataclasses.replace(
            scenario, perf=dataclasses.replace(scenario.perf, replications=args.replications))
    report = harness.run(scenario, workers=max(args.jobs, 1))
    out = Path(args.out) if args.out else Path("out") / scenario.name
    for path in harness.emit_csv(report, out):
        print(f"wrote {path}")
    for line in harness.summary_lines(report):
        print(line)
    return EXIT_OK


def _cmd_compare(args) -> int:
    a = harness.load_report(args.report_a)
    b = harness.load_report(args.report_b)
    for line in harness.compare(a, b).lines():
        print(line)
    return EXIT_OK


def _cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    pods = sum(t.replicas for t in scenario.claims)
    print(f"ok: {scenario.name} ({len(scenario.nodes)} nodes, {pods} pods, "
          f"{scenario.perf.replications} replications, seed {scenario.seed})")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "compare": _cmd_compare, "validate": _cmd_validate}[args.command]
    try:
        return handler(args)
    except ScenarioError as exc:
        print(f"knd-sim: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (harness.HarnessError, OSError, ValueError) as exc:
        print(f"knd-sim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

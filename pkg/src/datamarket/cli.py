"""Command line entry point.

    datamarket run <file> [--seed N] [--report PATH] [--trace PATH] [--no-figures]
    datamarket verify <file>
    datamarket list

``<file>`` is a path or the name of a bundled scenario. ``run`` exits 0
only when every invariant held; 1 on a violation; 2 on a bad scenario.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .engine import ScenarioParseError, bundled_scenarios, load_scenario, run_scenario, summary_table

log = logging.getLogger("datamarket")

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_BAD_SCENARIO = 2


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return value


def cmd_run(args: argparse.Namespace) -> int:
    try:
        sc = load_scenario(args.file, args.seed)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    result = run_scenario(sc)
    print(summary_table(result.report))
    for v in result.report["violations"]:
        print(f"violation: {v}", file=sys.stderr)
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(result.report_json())
        if not args.no_figures:
            from .plotting import render

            for f in render(result.report, path):
                log.info("wrote %s", f)
    if args.trace:
        path = Path(args.trace)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(result.trace_text())
    return EXIT_OK if result.ok else EXIT_VIOLATION


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        sc = load_scenario(args.file)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    if sc.kind == "challenge_matrix":
        print(f"ok: {sc.name} (challenge_matrix)")
    else:
        orders = sum(len(b.orders) for b in sc.buyers)
        print(f"ok: {sc.name}: {len(sc.buyers)} buyer(s), {len(sc.sellers)} seller(s), {len(sc.notaries)} notary(ies), {orders} order(s)")
    return EXIT_OK


def cmd_list(args: argparse.Namespace) -> int:
    for name in bundled_scenarios():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datamarket", description="Deterministic data-marketplace protocol simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log written files and actor decisions")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario and report")
    run.add_argument("file", help="scenario JSON path or bundled scenario name")
    run.add_argument("--seed", type=_seed, help="override the scenario seed")
    run.add_argument("--report", help="write the JSON report here (figures and CSV alongside)")
    run.add_argument("--trace", help="write the JSON-lines trace here")
    run.add_argument("--no-figures", action="store_true", help="skip figures and CSV next to the report")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="validate a scenario without running it")
    verify.add_argument("file")
    verify.set_defaults(func=cmd_verify)

    lst = sub.add_parser("list", help="list bundled scenarios")
    lst.set_defaults(func=cmd_list)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

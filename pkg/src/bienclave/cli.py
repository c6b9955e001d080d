"""Command-line entry point: ``bienclave <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench
from .adversary import PREDICTED_FLIPS, full_table_suite
from .errors import AblationRefused, ConfigError, ParseError, ScenarioError, SimError
from .fixture import build_fixture
from .machine import ABLATIONS
from .policy import load_policy, render
from .replay import TraceError, build_system, load_config, report_json, run_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_iters(text: str) -> int:
    value = int(text)
    if value < bench.MIN_ITERS:
        raise argparse.ArgumentTypeError(f"iterations must be at least {bench.MIN_ITERS}")
    return value


def _sizes(text: str) -> list:
    try:
        sizes = [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError("sizes must be comma-separated integers") from None
    bad = [s for s in sizes if s not in bench.ALLOWED_SIZES]
    if bad or not sizes:
        raise argparse.ArgumentTypeError(f"sizes must be powers of two in 64..65536, got {bad}")
    return sizes


def _write(path, text: str) -> None:
    if path:
        Path(path).write_text(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--report", metavar="PATH", help="write the JSON report here")
    common.add_argument("--seed", type=_u64, default=0, help="u64 seed for synthetic inputs")
    common.add_argument("--ablate", action="append", default=[], choices=sorted(ABLATIONS),
                        metavar="CHECK", help="disable a hardware check (test builds only)")
    common.add_argument("--trace-access", action="store_true",
                        help="record every address translation in the report")

    p = argparse.ArgumentParser(prog="bienclave", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="replay a trace against a configured system")
    run.add_argument("config", help="system config JSON")

    chk = sub.add_parser("check-policy", parents=[common], help="validate a policy file")
    chk.add_argument("policy")

    bch = sub.add_parser("bench-channel", parents=[common], help="channel microbenchmark")
    bch.add_argument("--sizes", type=_sizes, default=list(bench.SIZES))
    bch.add_argument("--iters", type=_positive_iters, default=bench.MIN_ITERS)
    bch.add_argument("--csv", metavar="PATH", help="write CSV here instead of stdout")

    atk = sub.add_parser("attack-suite", parents=[common], help="run the security-table suite")
    atk.add_argument("--fixtures", metavar="DIR", help="scenario directory (default: built-in)")

    dmp = sub.add_parser("dump-state", parents=[common], help="print the machine state as JSON")
    dmp.add_argument("config", nargs="?", help="system config JSON (default: built-in fixture)")
    return p


def cmd_run(args) -> int:
    try:
        report = run_config(args.config, seed=args.seed, ablations=args.ablate,
                            trace_access=args.trace_access)
    except TraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SimError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = report_json(report)
    if args.report:
        _write(args.report, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_check_policy(args) -> int:
    try:
        data = Path(args.policy).read_bytes()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        policy = load_policy(data)
    except ParseError as exc:
        print(f"invalid policy: line {exc.line}: {exc.reason}", file=sys.stderr)
        return EXIT_FAIL
    sys.stdout.write(render(policy))
    print(f"digest: {policy.digest.hex()}")
    _write(args.report, json.dumps({"valid": True, "digest": policy.digest.hex(),
                                    "canonical": render(policy)}, indent=1) + "\n")
    return EXIT_OK


def cmd_bench_channel(args) -> int:
    report = bench.run_bench(args.sizes, args.iters, args.seed)
    csv_text = bench.to_csv(report)
    if args.csv:
        _write(args.csv, csv_text)
    else:
        sys.stdout.write(csv_text)
    for chunk, ratio in report["ratio"].items():
        print(f"# ratio {chunk}: {ratio:.2f}x  gap {report['latency_gap_ns'][chunk]:.0f} ns",
              file=sys.stderr)
    _write(args.report, json.dumps(report, indent=1) + "\n")
    return EXIT_OK


def cmd_attack_suite(args) -> int:
    if args.fixtures is not None and not Path(args.fixtures).is_dir():
        print(f"error: fixture directory {args.fixtures} not found", file=sys.stderr)
        return EXIT_USAGE
    try:
        suite = full_table_suite(ablations=args.ablate, scenario_dir=args.fixtures)
    except AblationRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(suite.table())
    doc = suite.to_dict()
    if args.ablate:
        predicted = set().union(*(PREDICTED_FLIPS[a] for a in args.ablate))
        doc["predicted_flips"] = sorted(predicted)
        print(f"ablated: {', '.join(args.ablate)}; predicted rows {sorted(predicted)}")
    if suite.failed_rows:
        print(f"flipped rows: {sorted(suite.failed_rows)}")
    _write(args.report, json.dumps(doc, indent=1) + "\n")
    return EXIT_OK if suite.passed else EXIT_FAIL


def cmd_dump_state(args) -> int:
    try:
        if args.config:
            doc, base = load_config(args.config)
            m = build_system(doc, base, ablations=args.ablate).m
        else:
            m = build_fixture(ablations=args.ablate).m
    except (ConfigError, SimError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = m.dump_json() + "\n"
    if args.report:
        _write(args.report, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "check-policy": cmd_check_policy,
    "bench-channel": cmd_bench_channel,
    "attack-suite": cmd_attack_suite,
    "dump-state": cmd_dump_state,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

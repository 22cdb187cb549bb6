"""migrsim command line: run scenario files, replay the resume handshake
check, and inspect dump images.

Exit codes: 0 success, 1 assertion failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from checkpoint import load_image
from common.errors import ArgumentError, ImageError, ScenarioError
from common.utils import gid_hex, parse_bool
from scenario import EXIT_ASSERTION, EXIT_OK, EXIT_USAGE, Simulation, load_scenario, verify_resume_sequence
from telemetry import enable_metrics

load_dotenv()

logger = logging.getLogger(__name__)


def setup_logging() -> None:
    formatter = logging.Formatter(
        "%(asctime)s - %(levelname)s - %(name)s: %(lineno)d - %(message)s"
    )
    level_name = os.getenv("MIGRSIM_LOG_LEVEL")
    if level_name:
        level = logging.getLevelName(level_name.strip().upper())
        if not isinstance(level, int):
            level = logging.WARNING
    else:
        level = logging.INFO if os.getenv("ENV") == "prod" else logging.WARNING
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    logging.basicConfig(level=level, handlers=[console_handler], force=True)


def _env_int(name: str) -> Optional[int]:
    value = os.getenv(name)
    if value is None or not value.strip():
        return None
    try:
        return int(value, 0)
    except ValueError:
        logger.warning(f"ignoring {name}={value!r}: not an integer")
        return None


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError(f"out of range: {text}")
    return value


def _flag(text: str) -> bool:
    try:
        return parse_bool(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="migrsim", description="RDMA transport live-migration simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", help="scenario file (TOML)")
    run.add_argument("--seed", type=_u64, default=_env_int("MIGRSIM_DEFAULT_SEED"))
    run.add_argument("--trace", metavar="PATH", help="write the packet trace here")
    run.add_argument("--stats", metavar="PATH", help="append the run's stats record here")
    run.add_argument("--timeline", metavar="PATH", help="write QP state changes here")
    run.add_argument("--metrics", metavar="PATH", help="write Prometheus metrics here")
    run.add_argument("--max-ticks", type=_u64, default=_env_int("MIGRSIM_MAX_TICKS"))
    run.add_argument("--migration-enabled", type=_flag, metavar="{true,false}")

    resume = sub.add_parser("verify-fig6", help="check the packet sequence of a resume handshake")
    resume.add_argument("--first-unacked", type=int, default=5)
    resume.add_argument("--expected-psn", type=int, default=7)

    info = sub.add_parser("dump-info", help="summarize a .mgrd dump image")
    info.add_argument("image")
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as e:
        print(e.diagnostic(args.scenario), file=sys.stderr)
        return EXIT_USAGE

    metrics = enable_metrics() if args.metrics else None
    try:
        sim = Simulation(scenario, seed=args.seed, max_ticks=args.max_ticks, migration_enabled=args.migration_enabled)
    except ScenarioError as e:
        print(e.diagnostic(args.scenario), file=sys.stderr)
        return EXIT_USAGE
    if args.timeline:
        sim.record_timeline()
    result = sim.run()

    if args.trace:
        result.report.trace.write(args.trace)
    if args.stats:
        result.write_stats(args.stats)
    if args.timeline:
        with open(args.timeline, "w", encoding="utf-8") as fh:
            fh.writelines(line + "\n" for line in sim.timeline)
    if metrics is not None and not metrics.write_metrics(args.metrics):
        logger.error(f"could not write metrics to {args.metrics}")

    report = result.report
    print(
        f"seed={result.seed} final_tick={report.final_tick} sent={report.sent} "
        f"delivered={report.delivered} dropped={report.dropped} trace_sha256={report.trace.digest()}"
    )
    for m in result.migrations:
        print(
            f"migration ctx={m.spec.ctx_id} {gid_hex(m.spec.src.gid)} -> {gid_hex(m.spec.dst.gid)}: "
            f"{m.status.value} total_ticks={m.total_ticks}"
        )
    for a in result.assertions:
        print(a.describe())
    return result.exit_code


def cmd_verify_fig6(args: argparse.Namespace) -> int:
    try:
        check = verify_resume_sequence(args.first_unacked, args.expected_psn)
    except ArgumentError as e:
        print(f"migrsim verify-fig6: {e}", file=sys.stderr)
        return EXIT_USAGE
    if check.passed:
        print(" -> ".join(check.actual))
        return EXIT_OK
    print("packet sequence mismatch:")
    for line in check.diff():
        print(line)
    return EXIT_ASSERTION


def cmd_dump_info(args: argparse.Namespace) -> int:
    try:
        image = load_image(args.image)
    except ImageError as e:
        print(f"migrsim dump-info: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"node {gid_hex(image.node_gid)}: {image.object_count} objects")
    for line in image.summary():
        print(line)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    match args.command:
        case "run":
            return cmd_run(args)
        case "verify-fig6":
            return cmd_verify_fig6(args)
        case "dump-info":
            return cmd_dump_info(args)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

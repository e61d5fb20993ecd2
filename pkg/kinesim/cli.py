"""
kinesim command-line interface.

Each subcommand lives in kinesim.pipelines and is wired in here the same
way routers are included into an app. Exit codes: 0 success, 1 toolkit or
unexpected error, 2 usage error.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

from sqlalchemy.exc import SQLAlchemyError

from kinesim import __version__
from kinesim.core.config import configure_logging, settings
from kinesim.core.errors import KinesimError
from kinesim.pipelines import ablate, dpo, evaluate, gen_scenes, plot, rollout, runs, tokenize, train
from kinesim.pipelines.common import PipelineResult, common_parser, plain

logger = logging.getLogger("kinesim.cli")

PIPELINES = [gen_scenes, tokenize, train, rollout, evaluate, dpo, plot, ablate, runs]


class Colors:
    HEADER = "\033[95m"
    BLUE = "\033[94m"
    CYAN = "\033[96m"
    GREEN = "\033[92m"
    YELLOW = "\033[93m"
    RED = "\033[91m"
    BOLD = "\033[1m"
    END = "\033[0m"


def status(message: str, color: str = Colors.GREEN, icon: str = "✅") -> None:
    print(f"{color}{icon} {message}{Colors.END}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinesim", description="Kinematic-token driving simulation toolkit")
    parser.add_argument("--version", action="version", version=f"kinesim {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True
    parents = [common_parser()]
    for pipeline in PIPELINES:
        pipeline.register(subparsers, parents)
    return parser


def _registry_call(func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except SQLAlchemyError as exc:
        logger.warning("run registry unavailable: %s", exc)
        return None


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(args.log_level)
    record = settings.registry_enabled and args.recorded
    run_id = _registry_call(runs.start_run, args.command, args.seed, {"argv": argv if argv is not None else sys.argv[1:]}) if record else None

    try:
        result: PipelineResult = args.handler(args)
    except KinesimError as exc:
        status(f"{args.command} failed: {exc}", Colors.RED, "❌")
        if run_id is not None:
            _registry_call(runs.finish_run, run_id, "failed", error=str(exc))
        return 1
    except KeyboardInterrupt:
        status("interrupted", Colors.YELLOW, "⚠️")
        if run_id is not None:
            _registry_call(runs.finish_run, run_id, "failed", error="interrupted")
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected error in %s", args.command)
        status(f"An error occurred: {exc}", Colors.RED, "❌")
        if run_id is not None:
            _registry_call(runs.finish_run, run_id, "failed", error=repr(exc))
        return 1

    if run_id is not None:
        _registry_call(runs.finish_run, run_id, "ok", result.summary, result.config, result.artifacts)
    if args.json_summary:
        print(json.dumps({"command": args.command, "status": "ok", "run_id": run_id, **plain(result.summary)}, sort_keys=True))
    else:
        status(f"{args.command} done")
        for key, value in result.summary.items():
            if not isinstance(value, (dict, list)):
                print(f"   {Colors.CYAN}{key}{Colors.END}: {value}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

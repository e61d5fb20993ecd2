import argparse
import logging
from pathlib import Path
from typing import List

from kinesim.core.errors import ConfigError, EmptyDatasetError
from kinesim.metrics import DEFAULT_HORIZONS, evaluate_simulations, format_report, save_report
from kinesim.pipelines.common import PipelineResult, echo, require_dir, write_config_echo
from kinesim.rollout import load_simulations_dir
from kinesim.scenario_io import load_scenarios_dir

logger = logging.getLogger(__name__)

COMMAND = "eval"


def parse_horizons(text: str) -> List[float]:
    try:
        horizons = sorted(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"horizons must be comma-separated seconds, got '{text}'", key="horizons") from exc
    if not horizons or horizons[0] <= 0:
        raise ConfigError("horizons must be positive", key="horizons")
    return horizons


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="collision, kinematic and minADE metrics")
    parser.add_argument("--sims", type=Path, required=True, help="directory written by `rollout`")
    parser.add_argument("--ground-truth", type=Path, default=None, help="original scenes, enables minADE")
    parser.add_argument("--out", type=Path, required=True, help="report record file (.jsonl, one record per --name)")
    parser.add_argument("--name", default=None, help="report name (default: simulation directory name)")
    parser.add_argument("--horizons", default=",".join(f"{h:g}" for h in DEFAULT_HORIZONS), help="collision horizons in seconds")
    parser.set_defaults(handler=run, stochastic=False, recorded=True)


def run(args: argparse.Namespace) -> PipelineResult:
    horizons = parse_horizons(args.horizons)
    require_dir(args.sims, "simulations")
    ground_truth = None
    if args.ground_truth is not None:
        require_dir(args.ground_truth, "ground-truth scenes")
        scenes, _ = load_scenarios_dir(args.ground_truth, skip_invalid=True)
        ground_truth = {scene.scenario_id: scene for scene in scenes}
    sims = load_simulations_dir(args.sims)
    if not sims:
        raise EmptyDatasetError(f"no simulations in {args.sims}")

    name = args.name or args.sims.name
    report = evaluate_simulations(sims, ground_truth, horizons)
    save_report(report, args.out, name=name)
    echo(args, format_report({name: report}))
    effective = {"sims": args.sims, "ground_truth": args.ground_truth, "out": args.out, "name": name, "horizons": horizons}
    write_config_echo(args.out, COMMAND, effective)
    return PipelineResult(summary=report.model_dump(), config=effective, artifacts=[(args.out, "report")])

import argparse
import logging
from pathlib import Path

import pandas as pd

from kinesim.core.errors import ConfigError, EmptyDatasetError
from kinesim.pipelines.common import PipelineResult, require_dir, require_file, write_config_echo
from kinesim.plotting import group_by_scene, plot_loss_curve, plot_scenario, plot_simulations
from kinesim.rollout import load_simulations_dir
from kinesim.scenario_io import load_scenarios_dir

logger = logging.getLogger(__name__)

COMMAND = "plot"


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="top-down images of scenes or rollouts")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--scenes", type=Path, help="scenario directory")
    source.add_argument("--sims", type=Path, help="directory written by `rollout`")
    source.add_argument("--curve", type=Path, help="loss_curve.csv from `train`")
    parser.add_argument("--out", type=Path, required=True, help="output directory for PNG files")
    parser.add_argument("--window", type=float, default=None, help="half-width of the view around the ego (m)")
    parser.add_argument("--limit", type=int, default=None, help="plot at most N scenes")
    parser.set_defaults(handler=run, stochastic=False, recorded=True)


def run(args: argparse.Namespace) -> PipelineResult:
    if args.limit is not None and args.limit < 1:
        raise ConfigError("limit must be positive", key="limit")
    args.out.mkdir(parents=True, exist_ok=True)
    images = []
    if args.curve is not None:
        curve = pd.read_csv(require_file(args.curve, "loss curve"))
        images.append(plot_loss_curve(curve, args.out / f"{args.curve.stem}.png"))
    elif args.sims is not None:
        groups = group_by_scene(load_simulations_dir(require_dir(args.sims, "simulations")))
        for scenario_id in sorted(groups)[: args.limit]:
            images.append(plot_simulations(groups[scenario_id], args.out / f"{scenario_id}.png", window=args.window))
    else:
        scenarios, _ = load_scenarios_dir(require_dir(args.scenes, "scenes"), skip_invalid=True)
        for scenario in scenarios[: args.limit]:
            images.append(plot_scenario(scenario, args.out / f"{scenario.scenario_id}.png", window=args.window))
    if not images:
        raise EmptyDatasetError("nothing to plot")

    effective = {"scenes": args.scenes, "sims": args.sims, "curve": args.curve, "out": args.out, "window": args.window, "limit": args.limit}
    write_config_echo(args.out, COMMAND, effective)
    logger.info("wrote %d image(s) to %s", len(images), args.out)
    return PipelineResult(summary={"images": len(images)}, config=effective, artifacts=[(path, "plot") for path in images])

import argparse
import logging
from pathlib import Path
from typing import List

from tqdm import tqdm

from kinesim.core.config import progress_enabled
from kinesim.core.errors import EmptyDatasetError
from kinesim.pipelines.common import (
    PipelineResult,
    file_values,
    parse_ids,
    require_dir,
    require_file,
    require_seed,
    resolve,
    split_values,
    write_config_echo,
)
from kinesim.rollout import RolloutConfig, batch_rollouts, default_controlled, save_simulation
from kinesim.scenario_io import load_scenarios_dir, write_manifest
from kinesim.schemas import Scenario
from kinesim.training import load_checkpoint

logger = logging.getLogger(__name__)

COMMAND = "rollout"


def add_rollout_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint from `train` or `dpo`")
    parser.add_argument("--scenes", type=Path, required=True, help="scenario directory")
    parser.add_argument("--sampler", "--samplers", dest="sampler", default=None, help="argmax | top_p:<p> | temperature:<t>")
    parser.add_argument("--samples", type=int, default=None, help="rollouts per scene")
    parser.add_argument("--horizon", type=int, default=None, help="simulated steps")
    parser.add_argument("--window", type=int, default=None, help="tokenizer window for the logged history")


def scene_config(scenario: Scenario, config: RolloutConfig) -> RolloutConfig:
    """Per-scene copy with the horizon clipped to the logged future"""
    available = scenario.num_steps - 1 - scenario.current_index
    if config.horizon > available:
        logger.warning("%s: horizon %d clipped to the %d logged future steps", scenario.scenario_id, config.horizon, available)
        return config.model_copy(update={"horizon": available})
    return config


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="closed-loop rollouts of every scene")
    add_rollout_flags(parser)
    parser.add_argument("--out", type=Path, required=True, help="output directory for simulated scenes")
    parser.add_argument("--controlled", default=None, help="comma-separated ego ids (default: lowest id present)")
    parser.add_argument("--background-checkpoint", type=Path, default=None, help="model driving every other present agent")
    parser.set_defaults(handler=run, stochastic=True, recorded=True)


def run(args: argparse.Namespace) -> PipelineResult:
    values = file_values(args)
    (rollout_values,) = split_values(values, RolloutConfig)
    seed = require_seed(args, values)
    config = resolve(
        RolloutConfig,
        rollout_values,
        {
            "sampler": args.sampler,
            "samples": args.samples,
            "horizon": args.horizon,
            "window": args.window,
            "controlled": parse_ids(args.controlled),
            "seed": seed,
        },
    )
    require_file(args.checkpoint, "checkpoint")
    require_dir(args.scenes, "scenes")
    model, _ = load_checkpoint(args.checkpoint)
    background_model = None
    if args.background_checkpoint is not None:
        background_model, _ = load_checkpoint(require_file(args.background_checkpoint, "background checkpoint"))
    scenarios, _ = load_scenarios_dir(args.scenes, skip_invalid=True)
    if not scenarios:
        raise EmptyDatasetError(f"no readable scenes in {args.scenes}")

    args.out.mkdir(parents=True, exist_ok=True)
    files: List[Path] = []
    feasible = 0
    total = 0
    for scenario in tqdm(scenarios, desc="rollout", disable=not progress_enabled()):
        t0 = scenario.current_index
        controlled = config.controlled or default_controlled(scenario)
        if any(agent_id not in scenario.agent_ids or not scenario.track(agent_id).is_valid(t0) for agent_id in controlled):
            logger.warning("%s: controlled agent(s) %s not present at the current step, skipped", scenario.scenario_id, controlled)
            continue
        update = {"controlled": controlled}
        if background_model is not None:
            update["background"] = [
                track.agent_id for track in scenario.tracks if track.is_valid(t0) and track.agent_id not in controlled
            ]
        per_scene = scene_config(scenario, config).model_copy(update=update)
        for sim in batch_rollouts(scenario, model, per_scene, background_model=background_model):
            feasible += int(sim.is_feasible())
            total += 1
            scenario_file, _ = save_simulation(sim, args.out)
            files.append(scenario_file)

    manifest = write_manifest(args.out, files)
    effective = {
        "checkpoint": args.checkpoint,
        "background_checkpoint": args.background_checkpoint,
        "scenes": args.scenes,
        "out": args.out,
        "rollout": config,
    }
    write_config_echo(args.out, COMMAND, effective)
    return PipelineResult(
        summary={"scenes": len(scenarios), "simulations": total, "feasible": feasible, "manifest": str(manifest)},
        config=effective,
        artifacts=[(manifest, "manifest")],
    )

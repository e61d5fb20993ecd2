import argparse
import logging
from pathlib import Path
from typing import Dict, List

from tqdm import tqdm

from kinesim.core.config import progress_enabled
from kinesim.core.errors import EmptyDatasetError
from kinesim.network import KinematicTokenModel
from kinesim.pipelines.common import (
    PipelineResult,
    file_values,
    require_dir,
    require_file,
    require_seed,
    resolve,
    split_values,
    write_config_echo,
)
from kinesim.pipelines.rollout import add_rollout_flags, scene_config
from kinesim.preference import (
    DPOConfig,
    DriverProfile,
    PreferencePair,
    build_pairs,
    dpo_finetune,
    load_pairs,
    prepare_pairs,
    preference_margin,
    save_pairs,
)
from kinesim.rollout import RolloutConfig, batch_rollouts, default_controlled
from kinesim.scenario_io import file_sha256, load_scenarios_dir
from kinesim.schemas import Scenario
from kinesim.training import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

COMMAND = "dpo"
DEFAULT_SAMPLES = 16
DEFAULT_SAMPLER = "top_p:0.95"


def collect_pairs(
    scenarios: List[Scenario], model: KinematicTokenModel, config: RolloutConfig, profile: DriverProfile
) -> List[PreferencePair]:
    """K log-replay rollouts of each scene's ego, turned into at most one pair per scene"""
    pairs: List[PreferencePair] = []
    for scenario in tqdm(scenarios, desc=f"pairs ({profile.value})", disable=not progress_enabled()):
        ego = default_controlled(scenario)
        per_scene = scene_config(scenario, config).model_copy(update={"controlled": ego, "background": []})
        if per_scene.horizon == 0:
            continue
        found = build_pairs(batch_rollouts(scenario, model, per_scene), profile, ego[0])
        logger.debug("%s: %d pair(s)", scenario.scenario_id, len(found))
        pairs.extend(found)
    return pairs


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="driver-profile preference fine-tuning")
    add_rollout_flags(parser)
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--profile", required=True, choices=[profile.value for profile in DriverProfile])
    parser.add_argument("--pairs", type=Path, default=None, help="reuse a pair file instead of sampling rollouts")
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.set_defaults(handler=run, stochastic=True, recorded=True)


def run(args: argparse.Namespace) -> PipelineResult:
    values = file_values(args)
    dpo_values, rollout_values = split_values(values, DPOConfig, RolloutConfig)
    seed = require_seed(args, values)
    profile = DriverProfile(args.profile)
    dpo_config = resolve(
        DPOConfig,
        dpo_values,
        {
            "beta": args.beta,
            "lr": args.lr,
            "steps": args.steps,
            "batch_size": args.batch_size,
            "window": args.window,
            "seed": seed,
        },
    )
    rollout_config = resolve(
        RolloutConfig,
        {"samples": DEFAULT_SAMPLES, "sampler": DEFAULT_SAMPLER, **rollout_values},
        {
            "sampler": args.sampler,
            "samples": args.samples,
            "horizon": args.horizon,
            "window": dpo_config.window,
            "seed": seed,
        },
    )
    require_file(args.checkpoint, "checkpoint")
    require_dir(args.scenes, "scenes")
    if args.pairs is not None:
        require_file(args.pairs, "pair")

    pretrained, metadata = load_checkpoint(args.checkpoint)
    scenarios, _ = load_scenarios_dir(args.scenes, skip_invalid=True)
    by_id: Dict[str, Scenario] = {scenario.scenario_id: scenario for scenario in scenarios}

    args.out.mkdir(parents=True, exist_ok=True)
    if args.pairs is not None:
        pairs = [pair for pair in load_pairs(args.pairs, by_id) if pair.profile is profile]
        pairs_path = args.pairs
    else:
        pairs = collect_pairs(scenarios, pretrained, rollout_config, profile)
        pairs_path = args.out / "pairs.jsonl"
        save_pairs(pairs, pairs_path)
    if not pairs:
        raise EmptyDatasetError(
            f"no {profile.value} preference pairs: no scene produced both a colliding and a collision-free rollout"
        )
    logger.info("%d %s pair(s) from %d scene(s)", len(pairs), profile.value, len(scenarios))

    policy, history = dpo_finetune(pretrained, pairs, dpo_config)
    margin = preference_margin(policy, pretrained, prepare_pairs(policy.config, pairs, dpo_config.window))
    checkpoint = save_checkpoint(
        policy,
        args.out / "model.pt",
        {
            **metadata,
            "profile": profile.value,
            "pairs": len(pairs),
            "base_checkpoint_sha256": file_sha256(args.checkpoint),
            "dpo_steps": dpo_config.steps,
        },
    )
    history_path = args.out / "dpo_history.csv"
    history.to_csv(history_path, index=False)
    effective = {
        "checkpoint": args.checkpoint,
        "scenes": args.scenes,
        "out": args.out,
        "profile": profile.value,
        "pairs_file": pairs_path,
        "dpo": dpo_config,
        "rollout": rollout_config,
    }
    write_config_echo(args.out, COMMAND, effective)
    return PipelineResult(
        summary={
            "profile": profile.value,
            "pairs": len(pairs),
            "initial_loss": float(history["loss"].iloc[0]),
            "final_loss": float(history["loss"].iloc[-1]),
            "margin": margin,
            "checkpoint": str(checkpoint),
        },
        config=effective,
        artifacts=[(checkpoint, "checkpoint"), (Path(pairs_path), "pairs"), (history_path, "dpo_history")],
    )

import argparse
import logging
from pathlib import Path

from kinesim.core.errors import EmptyDatasetError
from kinesim.network import ModelConfig, build_model, count_parameters
from kinesim.pipelines.common import (
    PipelineResult,
    file_values,
    require_dir,
    require_file,
    require_seed,
    resolve,
    split_values,
    workers,
    write_config_echo,
)
from kinesim.plotting import plot_loss_curve
from kinesim.scenario_io import load_scenarios_dir
from kinesim.tokenizer import load_token_dataset
from kinesim.training import TrainConfig, build_examples, save_checkpoint, save_loss_curve, split_examples, train

logger = logging.getLogger(__name__)

COMMAND = "train"
CHECKPOINT_NAME = "model.pt"


def add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scenes", type=Path, required=True, help="scenario directory")
    parser.add_argument("--tokens", type=Path, required=True, help="token dataset from `tokenize`")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None, help="peak learning rate of the one-cycle schedule")
    parser.add_argument("--val-fraction", type=float, default=None)


def training_inputs(args: argparse.Namespace):
    """Validated model and training configs plus the loaded scenes and token records"""
    values = file_values(args)
    model_values, train_values = split_values(values, ModelConfig, TrainConfig)
    seed = require_seed(args, values)
    model_config = resolve(ModelConfig, model_values, {})
    train_config = resolve(
        TrainConfig,
        train_values,
        {
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "val_fraction": args.val_fraction,
            "seed": seed,
            "workers": workers(args),
        },
    )
    require_dir(args.scenes, "scenes")
    require_file(args.tokens, "token dataset")
    scenarios, _ = load_scenarios_dir(args.scenes, skip_invalid=True)
    records = load_token_dataset(args.tokens)
    if not scenarios or not records:
        raise EmptyDatasetError(f"nothing to train on ({len(scenarios)} scenes, {len(records)} token records)")
    return model_config, train_config, {s.scenario_id: s for s in scenarios}, records


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="teacher-forced training of the token model")
    add_training_flags(parser)
    parser.set_defaults(handler=run, stochastic=True, recorded=True)


def run(args: argparse.Namespace) -> PipelineResult:
    model_config, train_config, scenarios, records = training_inputs(args)
    examples = build_examples(scenarios, records, model_config)
    train_set, val_set = split_examples(examples, train_config.val_fraction, train_config.seed)
    logger.info("%d training and %d validation sequences", len(train_set), len(val_set))

    model = build_model(model_config, seed=train_config.seed)
    result = train(model, train_set, train_config, val_set or None)

    args.out.mkdir(parents=True, exist_ok=True)
    checkpoint = save_checkpoint(
        result.model,
        args.out / CHECKPOINT_NAME,
        {**result.metadata, "final_train_ce": result.final_train_ce, "final_val_ce": result.final_val_ce},
    )
    curve_csv = save_loss_curve(result.curve, args.out / "loss_curve.csv")
    curve_png = plot_loss_curve(result.curve, args.out / "loss_curve.png")
    effective = {"scenes": args.scenes, "tokens": args.tokens, "out": args.out, "model": model_config, "training": train_config}
    write_config_echo(args.out, COMMAND, effective)
    return PipelineResult(
        summary={
            "parameters": count_parameters(result.model),
            "train_sequences": len(train_set),
            "val_sequences": len(val_set),
            "final_train_ce": result.final_train_ce,
            "final_val_ce": result.final_val_ce,
            "checkpoint": str(checkpoint),
        },
        config=effective,
        artifacts=[(checkpoint, "checkpoint"), (curve_csv, "loss_curve"), (curve_png, "plot")],
    )

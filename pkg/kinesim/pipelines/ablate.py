import argparse
import logging
import math

from kinesim.core.errors import TrainingDivergedError
from kinesim.pipelines.common import PipelineResult, echo, write_config_echo
from kinesim.pipelines.train import add_training_flags, training_inputs
from kinesim.training import ablation_configs, run_ablation

logger = logging.getLogger(__name__)

COMMAND = "ablate"


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="train the four cumulative ablation configurations")
    add_training_flags(parser)
    parser.set_defaults(handler=run, stochastic=True, recorded=True)


def run(args: argparse.Namespace) -> PipelineResult:
    model_config, train_config, scenarios, records = training_inputs(args)
    table = run_ablation(scenarios, records, model_config, train_config)
    if not all(math.isfinite(value) for value in table["train_ce"]):
        raise TrainingDivergedError("ablation produced a non-finite loss", {"table": table.to_dict("records")})

    args.out.mkdir(parents=True, exist_ok=True)
    table_path = args.out / "ablation.csv"
    table.to_csv(table_path, index=False)
    echo(args, table.to_string(index=False, float_format=lambda value: f"{value:.4f}"))
    effective = {
        "scenes": args.scenes,
        "tokens": args.tokens,
        "out": args.out,
        "model": model_config,
        "training": train_config,
        "configurations": [name for name, _ in ablation_configs(model_config)],
    }
    write_config_echo(args.out, COMMAND, effective)
    return PipelineResult(
        summary={"rows": table.to_dict("records")},
        config=effective,
        artifacts=[(table_path, "ablation")],
    )

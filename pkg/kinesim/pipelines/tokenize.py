import argparse
import logging
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from kinesim.core.errors import EmptyDatasetError
from kinesim.pipelines.common import (
    PipelineResult,
    file_values,
    require_dir,
    resolve,
    split_values,
    workers,
    write_config_echo,
)
from kinesim.scenario_io import list_scenario_files, load_scenarios_dir
from kinesim.tokenizer import DEFAULT_WINDOW, recovery_rate, save_token_dataset, summarize_records, tokenize_all

logger = logging.getLogger(__name__)

COMMAND = "tokenize"


class TokenizeSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=DEFAULT_WINDOW, ge=1)
    dt: Optional[float] = Field(default=None, gt=0)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="inverse kinematic tokenization of every track")
    parser.add_argument("--scenes", type=Path, required=True, help="scenario directory")
    parser.add_argument("--out", type=Path, required=True, help="token dataset file (.jsonl)")
    parser.add_argument("-k", "--window", dest="k", type=int, default=None, help=f"rolling window (default {DEFAULT_WINDOW})")
    parser.add_argument("--dt", type=float, default=None, help="expected step length; scenes with another dt are skipped")
    parser.set_defaults(handler=run, stochastic=False, recorded=True)


def run(args: argparse.Namespace) -> PipelineResult:
    (values,) = split_values(file_values(args), TokenizeSettings)
    config = resolve(TokenizeSettings, values, {"k": args.k, "dt": args.dt})
    require_dir(args.scenes, "scenes")
    if not list_scenario_files(args.scenes):
        raise EmptyDatasetError(f"no scenario files in {args.scenes}")

    scenarios, unreadable = load_scenarios_dir(args.scenes, skip_invalid=True)
    skipped = len(unreadable)
    if config.dt is not None:
        mismatched = [s for s in scenarios if abs(s.dt - config.dt) > 1e-12]
        for scenario in mismatched:
            logger.warning("skipping %s: dt %.3f differs from %.3f", scenario.scenario_id, scenario.dt, config.dt)
        dropped = {s.scenario_id for s in mismatched}
        scenarios = [s for s in scenarios if s.scenario_id not in dropped]
        skipped += len(mismatched)

    records = tokenize_all(scenarios, k=config.k, workers=workers(args))
    save_token_dataset(records, args.out)
    summary = dict(summarize_records(records))
    summary["scenarios"] = len(scenarios)
    summary["skipped"] = skipped
    summary["recovery_rate"] = recovery_rate(records, {s.scenario_id: s for s in scenarios})
    effective = {"scenes": args.scenes, "out": args.out, "workers": workers(args), "tokenizer": config}
    write_config_echo(args.out, COMMAND, effective)
    return PipelineResult(summary=summary, config=effective, artifacts=[(args.out, "tokens")])

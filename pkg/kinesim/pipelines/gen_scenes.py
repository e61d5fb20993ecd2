import argparse
import logging
from pathlib import Path

from kinesim.pipelines.common import PipelineResult, file_values, require_seed, resolve, split_values, write_config_echo
from kinesim.scenario_io import save_scenario, scenario_path, write_manifest
from kinesim.synthetic import GeneratorConfig, generate_synthetic

logger = logging.getLogger(__name__)

COMMAND = "gen-scenes"


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="generate synthetic scenario files")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--per-archetype", type=int, default=None, help="set every archetype count to N")
    parser.add_argument("--future-len", type=int, default=None)
    parser.add_argument("--out-of-codebook", action="store_true", help="smooth tracks that are not exact token chains")
    parser.set_defaults(handler=run, stochastic=True, recorded=True)


def run(args: argparse.Namespace) -> PipelineResult:
    values = file_values(args)
    (generator_values,) = split_values(values, GeneratorConfig, extra=("seed",))
    flags = {"future_len": args.future_len, "in_codebook": False if args.out_of_codebook else None}
    if args.per_archetype is not None:
        for archetype, _ in GeneratorConfig().counts():
            flags[archetype.value.replace("-", "_")] = args.per_archetype
    config = resolve(GeneratorConfig, generator_values, flags)
    seed = require_seed(args, values)

    args.out.mkdir(parents=True, exist_ok=True)
    paths = [save_scenario(scenario, scenario_path(args.out, scenario.scenario_id)) for scenario in generate_synthetic(config, seed)]
    manifest = write_manifest(args.out, paths)
    effective = {"seed": seed, "out": args.out, "generator": config}
    write_config_echo(args.out, COMMAND, effective)
    logger.info("wrote %d scenario file(s) to %s", len(paths), args.out)
    return PipelineResult(
        summary={"scenarios": len(paths), "manifest": str(manifest), "counts": {a.value: n for a, n in config.counts()}},
        config=effective,
        artifacts=[(manifest, "manifest")],
    )

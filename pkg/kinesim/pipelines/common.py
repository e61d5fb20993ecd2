"""
Plumbing shared by the subcommands: flag/file/default precedence, seeds,
input checks and the config echo written next to every output.
"""

import argparse
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

from pydantic import BaseModel

from kinesim import __version__
from kinesim.core.config import read_kv_file, settings, validate_config
from kinesim.core.errors import ConfigError

CONFIG_ECHO = "config_echo.json"


@dataclass
class PipelineResult:
    """What a subcommand hands back to the CLI driver"""

    summary: Dict[str, Any]
    config: Dict[str, Any]
    artifacts: List[Tuple[Path, str]] = field(default_factory=list)


def common_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--seed", type=int, default=None, help="random seed (required by stochastic commands)")
    parent.add_argument("--workers", type=int, default=None, help=f"worker processes (default {settings.workers})")
    parent.add_argument("--config", type=Path, default=None, help="flat key=value configuration file")
    parent.add_argument("--json-summary", action="store_true", help="print a machine-readable summary record on stdout")
    parent.add_argument("--log-level", default=None, help=f"logging level (default {settings.log_level})")
    return parent


def file_values(args: argparse.Namespace) -> Dict[str, str]:
    return read_kv_file(args.config) if getattr(args, "config", None) else {}


def split_values(values: Dict[str, Any], *models: Type[BaseModel], extra: Sequence[str] = ()) -> List[Dict[str, Any]]:
    """Route flat keys to the model owning them; `extra` keys are handled by the caller"""
    routed: List[Dict[str, Any]] = [{} for _ in models]
    for key, value in values.items():
        owner = next((i for i, model in enumerate(models) if key in model.model_fields), None)
        if owner is not None:
            routed[owner][key] = value
        elif key not in extra:
            raise ConfigError("unknown configuration key", key=key)
    return routed


def resolve(model: Type[BaseModel], from_file: Dict[str, Any], flags: Dict[str, Any]):
    """Explicit flag > config file > model default"""
    values = dict(from_file)
    values.update({key: value for key, value in flags.items() if value is not None})
    return validate_config(model, values)


def require_seed(args: argparse.Namespace, from_file: Dict[str, Any]) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in from_file:
        try:
            return int(from_file["seed"])
        except ValueError as exc:
            raise ConfigError("seed must be an integer", key="seed") from exc
    raise ConfigError("this command is stochastic and needs an explicit seed (--seed)", key="seed")


def workers(args: argparse.Namespace) -> int:
    count = args.workers if args.workers is not None else settings.workers
    if count < 1:
        raise ConfigError("worker count must be at least 1", key="workers")
    return count


def require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise ConfigError(f"{what} directory not found: {path}")
    return path


def require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return path


def parse_ids(text: Optional[str]) -> Optional[List[int]]:
    if text is None or not text.strip():
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"agent ids must be comma-separated integers, got '{text}'") from exc


def plain(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    return value


def write_config_echo(location: Path, command: str, config: Dict[str, Any]) -> Path:
    """Effective settings of a run; `location` is an output directory or an output file"""
    location = Path(location)
    if location.suffix and not location.is_dir():
        target = location.with_name(f"{location.name.split('.')[0]}.{CONFIG_ECHO}")
    else:
        target = location / CONFIG_ECHO
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, **plain(config)}
    target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return target


def echo(args: argparse.Namespace, text: str) -> None:
    """Human-readable output; silent when stdout carries the JSON summary"""
    if not getattr(args, "json_summary", False):
        print(text)

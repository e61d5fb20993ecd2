"""
Runtime settings and flat key=value configuration files.

Settings come from the environment (a .env file is loaded first). Pipeline
configuration files are plain key=value text parsed with python-dotenv and
validated by the pydantic model that owns the keys.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError

from kinesim.core.errors import ConfigError

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

ModelT = TypeVar("ModelT", bound=BaseModel)


class Settings(BaseModel):
    database_url: str = "sqlite:///./kinesim_runs.db"
    log_level: str = "INFO"
    workers: int = Field(default=1, ge=1)
    registry_enabled: bool = True

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            database_url=os.getenv("KINESIM_DATABASE_URL", "sqlite:///./kinesim_runs.db"),
            log_level=os.getenv("KINESIM_LOG_LEVEL", "INFO").upper(),
            workers=int(os.getenv("KINESIM_WORKERS", "1")),
            registry_enabled=os.getenv("KINESIM_REGISTRY", "on").lower() not in ("off", "0", "false"),
        )


settings = Settings.from_env()


def configure_logging(level: Optional[str] = None) -> None:
    """Install the single stream handler used by the CLI"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel((level or settings.log_level).upper())


def progress_enabled() -> bool:
    return logging.getLogger("kinesim").getEffectiveLevel() <= logging.INFO


def read_kv_file(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a flat key=value file; blank values are dropped"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(path)
    return {key: value for key, value in values.items() if value not in (None, "")}


def validate_config(model: Type[ModelT], values: Dict[str, Any]) -> ModelT:
    """Validate raw values against a config model, naming the offending key"""
    try:
        return model.model_validate(values)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first.get("loc", ())) or None
        if first.get("type") == "extra_forbidden":
            raise ConfigError("unknown configuration key", key=key) from exc
        raise ConfigError(first.get("msg", "invalid configuration"), key=key) from exc


def load_kv_config(model: Type[ModelT], path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ModelT:
    values: Dict[str, Any] = dict(read_kv_file(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(model, values)

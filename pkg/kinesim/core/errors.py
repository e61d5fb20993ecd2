"""
Exception hierarchy for kinesim.

Everything raised on purpose by the toolkit derives from KinesimError so the
CLI can turn it into a clean exit code.
"""

from typing import Any, Dict, Optional


class KinesimError(Exception):
    """Base class for all toolkit errors"""


class NonFiniteValueError(KinesimError, ValueError):
    """A numeric input was NaN or infinite"""


class TokenIndexError(KinesimError, IndexError):
    """Codebook index outside the 63x63 grid"""


class TokenizerError(KinesimError):
    """Inverse kinematic transformation failed"""


class ConfigError(KinesimError):
    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{message} (key: {key})" if key else message)


class ScenarioParseError(KinesimError):
    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ScenarioInvariantError(KinesimError):
    def __init__(self, message: str, track_id: Optional[int] = None):
        self.track_id = track_id
        prefix = f"track {track_id}: " if track_id is not None else ""
        super().__init__(prefix + message)


class MissingReplayStateError(KinesimError):
    def __init__(self, agent_id: int, step: int):
        self.agent_id = agent_id
        self.step = step
        super().__init__(f"no logged state for replayed agent {agent_id} at step {step}")


class EmptyDatasetError(KinesimError):
    """Nothing to train on"""


class NonFiniteGradientError(KinesimError):
    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"non-finite gradient in parameter '{parameter}'")


class TrainingDivergedError(KinesimError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} [{details}]" if details else message)


class InvalidArgumentError(KinesimError, ValueError):
    """A precondition on an argument does not hold"""

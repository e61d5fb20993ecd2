# kinesim/schemas.py
"""
Scenario data model and the line-delimited record types.

Kinematic state/action types live in kinesim.core and are re-exported here so
callers can import every domain type from one place.
"""

from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from kinesim.core.action_codec import ActionToken, VOCAB_SIZE
from kinesim.core.errors import ScenarioInvariantError
from kinesim.core.kinematics import AgentState, ControlAction

__all__ = [
    "ActionToken",
    "AgentKind",
    "AgentMeta",
    "AgentState",
    "ControlAction",
    "LightState",
    "MapPolyline",
    "PairRecord",
    "PolylineKind",
    "Scenario",
    "TokenRecord",
    "Track",
    "TrafficLight",
]

Point = Tuple[float, float]


class AgentKind(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class PolylineKind(str, Enum):
    LANE_CENTER = "lane_center"
    ROAD_EDGE = "road_edge"
    CROSSWALK = "crosswalk"
    STOP_LINE = "stop_line"


class LightState(str, Enum):
    RED = "red"
    YELLOW = "yellow"
    GREEN = "green"
    UNKNOWN = "unknown"


AGENT_KIND_INDEX: Dict[AgentKind, int] = {kind: i for i, kind in enumerate(AgentKind)}
POLYLINE_KIND_INDEX: Dict[PolylineKind, int] = {kind: i for i, kind in enumerate(PolylineKind)}
LIGHT_STATE_INDEX: Dict[LightState, int] = {state: i for i, state in enumerate(LightState)}


class AgentMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    kind: AgentKind = AgentKind.VEHICLE
    length: float = Field(gt=0)
    width: float = Field(gt=0)


class Track(BaseModel):
    """Logged states of one agent at the scenario's fixed dt"""

    meta: AgentMeta
    states: List[AgentState]
    valid: List[bool]
    # generator ground truth, one token per transition
    gt_tokens: Optional[List[int]] = None

    @model_validator(mode="after")
    def _lengths_match(self) -> "Track":
        if len(self.states) != len(self.valid):
            raise ScenarioInvariantError(
                f"{len(self.states)} states but {len(self.valid)} validity flags", track_id=self.meta.id
            )
        if self.gt_tokens is not None:
            if len(self.gt_tokens) != max(len(self.states) - 1, 0):
                raise ScenarioInvariantError("ground-truth token count must be one less than state count", track_id=self.meta.id)
            if any(not 0 <= token < VOCAB_SIZE for token in self.gt_tokens):
                raise ScenarioInvariantError("ground-truth token out of range", track_id=self.meta.id)
        return self

    @property
    def agent_id(self) -> int:
        return self.meta.id

    @property
    def num_steps(self) -> int:
        return len(self.states)

    def is_valid(self, t: int) -> bool:
        return 0 <= t < len(self.states) and self.valid[t]

    def state_at(self, t: int) -> Optional[AgentState]:
        return self.states[t] if self.is_valid(t) else None


class MapPolyline(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    kind: PolylineKind
    points: List[Point] = Field(min_length=2)


class TrafficLight(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    stop_point: Point
    states: List[LightState]


class Scenario(BaseModel):
    """The world: static map, per-step light states and agent tracks"""

    scenario_id: str
    dt: float = Field(gt=0)
    history_len: int = Field(ge=0)
    future_len: int = Field(ge=0)
    polylines: List[MapPolyline] = Field(default_factory=list)
    tracks: List[Track] = Field(default_factory=list)
    lights: List[TrafficLight] = Field(default_factory=list)

    @model_validator(mode="after")
    def _shared_length(self) -> "Scenario":
        expected = self.num_steps
        seen = set()
        for track in self.tracks:
            if track.agent_id in seen:
                raise ScenarioInvariantError("duplicate agent id", track_id=track.agent_id)
            seen.add(track.agent_id)
            if track.num_steps != expected:
                raise ScenarioInvariantError(
                    f"track has {track.num_steps} steps, scenario expects {expected}", track_id=track.agent_id
                )
        for light in self.lights:
            if len(light.states) != expected:
                raise ScenarioInvariantError(f"traffic light {light.id} has {len(light.states)} states, expected {expected}")
        return self

    @property
    def num_steps(self) -> int:
        return self.history_len + 1 + self.future_len

    @property
    def current_index(self) -> int:
        return self.history_len

    @property
    def agent_ids(self) -> List[int]:
        return [track.agent_id for track in self.tracks]

    def track(self, agent_id: int) -> Track:
        for track in self.tracks:
            if track.agent_id == agent_id:
                return track
        raise KeyError(f"scenario {self.scenario_id} has no agent {agent_id}")


class TokenRecord(BaseModel):
    """One line of the token dataset"""

    scenario_id: str
    agent_id: int
    dt: float = Field(gt=0)
    initial_state: Tuple[float, float, float, float]
    tokens: List[int]
    mean_residual: float = 0.0
    max_residual: float = 0.0

    @field_validator("tokens")
    @classmethod
    def _in_vocab(cls, tokens: List[int]) -> List[int]:
        if any(not 0 <= token < VOCAB_SIZE for token in tokens):
            raise ValueError("token index outside the codebook")
        return tokens


class PairRecord(BaseModel):
    """One line of the preference pair dataset"""

    scenario_id: str
    agent_id: int
    start_index: int
    profile: str
    winner: List[int]
    loser: List[int]

    @model_validator(mode="after")
    def _distinct(self) -> "PairRecord":
        if self.winner == self.loser:
            raise ValueError("winner and loser sequences must differ")
        return self

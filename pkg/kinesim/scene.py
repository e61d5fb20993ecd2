"""
Agent-centric vectorized scene representation.

Agents are described by the four edge vectors of their bounding boxes and map
lines by the vectors between consecutive (resampled) points, so both kinds of
element share one spatial encoding. Every coordinate handed to the network is
expressed in the target agent's frame at the step being encoded.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from kinesim.core.action_codec import START_TOKEN
from kinesim.core.errors import InvalidArgumentError
from kinesim.core.kinematics import AgentState
from kinesim.schemas import (
    AGENT_KIND_INDEX,
    LIGHT_STATE_INDEX,
    POLYLINE_KIND_INDEX,
    AgentMeta,
    LightState,
    MapPolyline,
    Scenario,
)

MAP_RADIUS = 50.0
MAX_NEIGHBORS = 64
MAX_SEGMENT_LENGTH = 2.0

Pose = Tuple[float, float, float]


def to_agent_frame(point: Sequence[float], pose: Pose) -> Tuple[float, float]:
    """World point -> frame with the pose at the origin, heading along +x"""
    x, y, theta = pose
    dx, dy = point[0] - x, point[1] - y
    c, s = math.cos(theta), math.sin(theta)
    return (c * dx + s * dy, -s * dx + c * dy)


def from_agent_frame(point: Sequence[float], pose: Pose) -> Tuple[float, float]:
    x, y, theta = pose
    c, s = math.cos(theta), math.sin(theta)
    return (x + c * point[0] - s * point[1], y + s * point[0] + c * point[1])


def to_agent_frame_array(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Vectorized to_agent_frame over the last axis of shape (..., 2)"""
    x, y, theta = pose
    c, s = math.cos(theta), math.sin(theta)
    dx = points[..., 0] - x
    dy = points[..., 1] - y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def bbox_corners(state: AgentState, meta: AgentMeta) -> np.ndarray:
    """Corners in world coordinates, counterclockwise from front-left"""
    half_l, half_w = 0.5 * meta.length, 0.5 * meta.width
    local = np.array([[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]])
    c, s = math.cos(state.theta), math.sin(state.theta)
    rotation = np.array([[c, -s], [s, c]])
    return local @ rotation.T + np.array([state.x, state.y])


def bbox_vectors(state: AgentState, meta: AgentMeta, frame: Optional[Pose] = None) -> np.ndarray:
    """The four directed box edges as (start_x, start_y, end_x, end_y) rows"""
    corners = bbox_corners(state, meta)
    if frame is not None:
        corners = to_agent_frame_array(corners, frame)
    return np.concatenate([corners, np.roll(corners, -1, axis=0)], axis=1)


def resample_polyline(points: np.ndarray, max_segment: float = MAX_SEGMENT_LENGTH) -> np.ndarray:
    """Split segments longer than max_segment evenly; original vertices are kept"""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        raise InvalidArgumentError("a polyline needs at least two points")
    pieces = [points[:1]]
    for start, end in zip(points[:-1], points[1:]):
        length = float(np.hypot(*(end - start)))
        n_parts = max(1, int(math.ceil(length / max_segment - 1e-12)))
        fractions = np.arange(1, n_parts + 1)[:, None] / n_parts
        pieces.append(start + fractions * (end - start))
    return np.concatenate(pieces)


def polyline_vectors(polyline: MapPolyline, max_segment: float = MAX_SEGMENT_LENGTH) -> np.ndarray:
    """Consecutive-point segments of a (resampled) polyline, order preserved"""
    points = resample_polyline(np.asarray(polyline.points, dtype=np.float64), max_segment)
    return np.concatenate([points[:-1], points[1:]], axis=1)


def point_segment_distance(point: np.ndarray, segments: np.ndarray) -> np.ndarray:
    start, end = segments[:, :2], segments[:, 2:]
    direction = end - start
    length_sq = np.einsum("ij,ij->i", direction, direction)
    safe = np.where(length_sq > 0, length_sq, 1.0)
    t = np.clip(np.einsum("ij,ij->i", point - start, direction) / safe, 0.0, 1.0)
    closest = start + t[:, None] * direction
    return np.hypot(*(closest - point).T)


class MapIndex:
    """Pre-vectorized map of one scenario, cropped per query"""

    def __init__(self, polylines: Sequence[MapPolyline], max_segment: float = MAX_SEGMENT_LENGTH):
        vectors = [polyline_vectors(line, max_segment) for line in polylines]
        kinds = [np.full(len(vec), POLYLINE_KIND_INDEX[line.kind], dtype=np.int64) for vec, line in zip(vectors, polylines)]
        self.segments = np.concatenate(vectors) if vectors else np.zeros((0, 4))
        self.kinds = np.concatenate(kinds) if kinds else np.zeros(0, dtype=np.int64)

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "MapIndex":
        return cls(scenario.polylines)

    def crop(self, center: Sequence[float], radius: float) -> np.ndarray:
        if len(self.segments) == 0:
            return np.zeros(0, dtype=np.int64)
        distances = point_segment_distance(np.asarray(center, dtype=np.float64), self.segments)
        return np.nonzero(distances <= radius)[0]


@dataclass(frozen=True)
class WorldSnapshot:
    """Agents present at one step plus the light states of that step"""

    step: int
    agents: Dict[int, Tuple[AgentState, AgentMeta]]
    lights: List[Tuple[Tuple[float, float], LightState]] = field(default_factory=list)


def snapshot_at(scenario: Scenario, t: int) -> WorldSnapshot:
    agents = {}
    for track in scenario.tracks:
        state = track.state_at(t)
        if state is not None:
            agents[track.agent_id] = (state, track.meta)
    lights = [(light.stop_point, light.states[t]) for light in scenario.lights]
    return WorldSnapshot(step=t, agents=agents, lights=lights)


@dataclass
class SceneStepInput:
    """Everything the encoder sees for one agent at one step (target frame, metres)"""

    agent_id: int
    step: int
    target_speed: float
    target_kind: int
    target_size: Tuple[float, float]
    prev_token: int
    neighbor_ids: np.ndarray  # (N,)
    neighbor_kinds: np.ndarray  # (N,)
    neighbor_vectors: np.ndarray  # (N, 4, 4) box edges
    neighbor_velocities: np.ndarray  # (N, 2)
    neighbor_poses: np.ndarray  # (N, 4) x, y, cos, sin of relative heading
    map_vectors: np.ndarray  # (M, 4)
    map_kinds: np.ndarray  # (M,)
    light_points: np.ndarray  # (L, 2)
    light_states: np.ndarray  # (L,)

    @property
    def num_elements(self) -> int:
        return 4 * len(self.neighbor_ids) + len(self.map_vectors) + len(self.light_points)


def build_step_input_from_snapshot(
    snapshot: WorldSnapshot,
    map_index: MapIndex,
    agent_id: int,
    prev_token: int = START_TOKEN,
    radius: float = MAP_RADIUS,
    max_neighbors: int = MAX_NEIGHBORS,
) -> SceneStepInput:
    if agent_id not in snapshot.agents:
        raise InvalidArgumentError(f"agent {agent_id} is not present at step {snapshot.step}")
    target, meta = snapshot.agents[agent_id]
    pose = target.pose
    center = np.array([target.x, target.y])

    others = [(other_id, state, other_meta) for other_id, (state, other_meta) in snapshot.agents.items() if other_id != agent_id]
    if others:
        ids = np.array([item[0] for item in others])
        dists = np.array([math.hypot(item[1].x - target.x, item[1].y - target.y) for item in others])
        order = np.lexsort((ids, dists))[:max_neighbors]
        chosen = [others[i] for i in order]
    else:
        chosen = []

    n = len(chosen)
    neighbor_vectors = np.zeros((n, 4, 4))
    neighbor_velocities = np.zeros((n, 2))
    neighbor_poses = np.zeros((n, 4))
    for row, (_, state, other_meta) in enumerate(chosen):
        edges = bbox_vectors(state, other_meta)
        neighbor_vectors[row] = np.concatenate(
            [to_agent_frame_array(edges[:, :2], pose), to_agent_frame_array(edges[:, 2:], pose)], axis=1
        )
        relative_heading = state.theta - target.theta
        neighbor_velocities[row] = (state.v * math.cos(relative_heading), state.v * math.sin(relative_heading))
        local = to_agent_frame((state.x, state.y), pose)
        neighbor_poses[row] = (local[0], local[1], math.cos(relative_heading), math.sin(relative_heading))

    kept = map_index.crop(center, radius)
    segments = map_index.segments[kept]
    map_vectors = np.concatenate(
        [to_agent_frame_array(segments[:, :2], pose), to_agent_frame_array(segments[:, 2:], pose)], axis=1
    ) if len(kept) else np.zeros((0, 4))

    light_points = []
    light_states = []
    for stop_point, light_state in snapshot.lights:
        if math.hypot(stop_point[0] - target.x, stop_point[1] - target.y) <= radius:
            light_points.append(to_agent_frame(stop_point, pose))
            light_states.append(LIGHT_STATE_INDEX[light_state])

    return SceneStepInput(
        agent_id=agent_id,
        step=snapshot.step,
        target_speed=target.v,
        target_kind=AGENT_KIND_INDEX[meta.kind],
        target_size=(meta.length, meta.width),
        prev_token=int(prev_token),
        neighbor_ids=np.array([item[0] for item in chosen], dtype=np.int64),
        neighbor_kinds=np.array([AGENT_KIND_INDEX[item[2].kind] for item in chosen], dtype=np.int64),
        neighbor_vectors=neighbor_vectors,
        neighbor_velocities=neighbor_velocities,
        neighbor_poses=neighbor_poses,
        map_vectors=map_vectors,
        map_kinds=map_index.kinds[kept],
        light_points=np.array(light_points, dtype=np.float64).reshape(-1, 2),
        light_states=np.array(light_states, dtype=np.int64),
    )


def build_step_input(
    scenario: Scenario,
    agent_id: int,
    t: int,
    prev_token: int = START_TOKEN,
    map_index: Optional[MapIndex] = None,
    radius: float = MAP_RADIUS,
    max_neighbors: int = MAX_NEIGHBORS,
) -> SceneStepInput:
    """Encoder input for one agent at logged step t"""
    if not scenario.track(agent_id).is_valid(t):
        raise InvalidArgumentError(f"agent {agent_id} is not valid at step {t}")
    map_index = map_index or MapIndex.from_scenario(scenario)
    return build_step_input_from_snapshot(
        snapshot_at(scenario, t), map_index, agent_id, prev_token=prev_token, radius=radius, max_neighbors=max_neighbors
    )

"""
Synthetic scenario generator for desk-scale experiments.

Every track is produced by a scripted controller (pure pursuit along a lane,
time-headway car following, yield-or-go at a crossing) evaluated on the
current world and integrated with ctra_step. With in_codebook on, each
controller output is snapped to the nearest codebook action before it is
applied, so the logged trajectory is an exact token chain and the tokens are
stored with the track as ground truth.
"""

import logging
import math
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from kinesim.core.action_codec import A_MAX, W_MAX, ZERO_INDEX, ActionToken, dequantize, nearest_token
from kinesim.core.kinematics import AgentState, ControlAction, ctra_step
from kinesim.scene import to_agent_frame
from kinesim.schemas import (
    AgentKind,
    AgentMeta,
    LightState,
    MapPolyline,
    PolylineKind,
    Scenario,
    Track,
    TrafficLight,
)

logger = logging.getLogger(__name__)

LANE_WIDTH = 3.5
COMFORT_ACCEL = 2.0

World = Dict[int, AgentState]
Controller = Callable[[AgentState, int, World], ControlAction]


class Archetype(str, Enum):
    STRAIGHT_FOLLOW = "straight-follow"
    CURVE_FOLLOW = "curve-follow"
    INTERSECTION_TURN = "intersection-turn"
    CAR_FOLLOWING = "car-following"
    CROSSING_CONFLICT = "crossing-conflict"


class GeneratorConfig(BaseModel):
    """Flat generator settings; one count per archetype"""

    model_config = ConfigDict(extra="forbid")

    straight_follow: int = Field(default=0, ge=0)
    curve_follow: int = Field(default=0, ge=0)
    intersection_turn: int = Field(default=0, ge=0)
    car_following: int = Field(default=0, ge=0)
    crossing_conflict: int = Field(default=0, ge=0)
    lanes: int = Field(default=1, ge=1, le=8)
    dt: float = Field(default=0.5, gt=0)
    history_len: int = Field(default=2, ge=0)
    future_len: int = Field(default=16, ge=1)
    speed_min: float = Field(default=3.0, ge=0)
    speed_max: float = Field(default=10.0, ge=0)
    in_codebook: bool = True
    id_prefix: str = "syn"

    @model_validator(mode="after")
    def _speed_range(self) -> "GeneratorConfig":
        if self.speed_min > self.speed_max:
            raise ValueError("speed_min must not exceed speed_max")
        return self

    def counts(self) -> List[Tuple[Archetype, int]]:
        return [
            (Archetype.STRAIGHT_FOLLOW, self.straight_follow),
            (Archetype.CURVE_FOLLOW, self.curve_follow),
            (Archetype.INTERSECTION_TURN, self.intersection_turn),
            (Archetype.CAR_FOLLOWING, self.car_following),
            (Archetype.CROSSING_CONFLICT, self.crossing_conflict),
        ]

    @property
    def total(self) -> int:
        return sum(count for _, count in self.counts())

    @property
    def num_steps(self) -> int:
        return self.history_len + 1 + self.future_len


class Route:
    """Arc-length parametrized reference path for the lane-keeping controller"""

    def __init__(self, points: Sequence[Tuple[float, float]]):
        self.points = np.asarray(points, dtype=np.float64)
        deltas = np.diff(self.points, axis=0)
        self.lengths = np.hypot(deltas[:, 0], deltas[:, 1])
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.lengths)])

    @property
    def total_length(self) -> float:
        return float(self.cumulative[-1])

    def project(self, x: float, y: float) -> float:
        """Arc length of the closest point on the path"""
        start = self.points[:-1]
        direction = self.points[1:] - start
        safe = np.where(self.lengths > 0, self.lengths ** 2, 1.0)
        t = np.clip(((x - start[:, 0]) * direction[:, 0] + (y - start[:, 1]) * direction[:, 1]) / safe, 0.0, 1.0)
        closest = start + t[:, None] * direction
        index = int(np.argmin(np.hypot(closest[:, 0] - x, closest[:, 1] - y)))
        return float(self.cumulative[index] + t[index] * self.lengths[index])

    def point_at(self, s: float) -> Tuple[float, float]:
        if s >= self.total_length:
            tail = self.points[-1] - self.points[-2]
            tail = tail / np.hypot(*tail)
            extra = s - self.total_length
            return (float(self.points[-1, 0] + extra * tail[0]), float(self.points[-1, 1] + extra * tail[1]))
        s = max(s, 0.0)
        return (
            float(np.interp(s, self.cumulative, self.points[:, 0])),
            float(np.interp(s, self.cumulative, self.points[:, 1])),
        )

    def heading_at(self, s: float) -> float:
        index = int(np.clip(np.searchsorted(self.cumulative, s, side="right") - 1, 0, len(self.lengths) - 1))
        dx, dy = self.points[index + 1] - self.points[index]
        return math.atan2(dy, dx)


def _clip(value: float, bound: float) -> float:
    return min(max(value, -bound), bound)


def pure_pursuit_yaw_rate(state: AgentState, route: Route, min_lookahead: float = 4.0, lookahead_time: float = 1.2) -> float:
    lookahead = max(min_lookahead, lookahead_time * abs(state.v))
    target = route.point_at(route.project(state.x, state.y) + lookahead)
    lx, ly = to_agent_frame(target, state.pose)
    dist_sq = lx * lx + ly * ly
    curvature = 2.0 * ly / dist_sq if dist_sq > 1e-9 else 0.0
    return _clip(state.v * curvature, W_MAX)


def speed_tracking_accel(state: AgentState, target_speed: float, gain: float = 0.8) -> float:
    return _clip(gain * (target_speed - state.v), COMFORT_ACCEL)


def lane_keeper(route: Route, target_speed: float) -> Controller:
    def control(state: AgentState, step: int, world: World) -> ControlAction:
        return ControlAction(a=speed_tracking_accel(state, target_speed), w=pure_pursuit_yaw_rate(state, route))

    return control


def braking_leader(route: Route, target_speed: float, brake_from: int, brake_until: int, decel: float = 1.0) -> Controller:
    """Lane keeping with one scheduled braking phase; speed never drops below 1 m/s"""

    def control(state: AgentState, step: int, world: World) -> ControlAction:
        if brake_from <= step < brake_until and state.v > 1.0 + decel:
            accel = -decel
        elif step < brake_from:
            accel = speed_tracking_accel(state, target_speed)
        else:
            accel = 0.0
        return ControlAction(a=accel, w=pure_pursuit_yaw_rate(state, route))

    return control


def headway_follower(
    route: Route,
    leader_id: int,
    bumper_offset: float,
    target_speed: float,
    time_headway: float = 1.5,
    standstill_gap: float = 4.0,
    gap_gain: float = 0.2,
    speed_gain: float = 0.6,
) -> Controller:
    """Time-headway car following: close the gap error and the speed difference"""

    def control(state: AgentState, step: int, world: World) -> ControlAction:
        leader = world.get(leader_id)
        if leader is None:
            accel = speed_tracking_accel(state, target_speed)
        else:
            gap = math.hypot(leader.x - state.x, leader.y - state.y) - bumper_offset
            desired = standstill_gap + time_headway * state.v
            accel = gap_gain * (gap - desired) + speed_gain * (leader.v - state.v)
            accel = min(_clip(accel, A_MAX), speed_tracking_accel(state, target_speed))
        return ControlAction(a=accel, w=pure_pursuit_yaw_rate(state, route))

    return control


def yielding_driver(
    route: Route,
    crosser_id: int,
    target_speed: float,
    stop_x: float,
    zone_half_width: float,
) -> Controller:
    """Ego on the +x axis yielding to a vehicle crossing x = 0 northbound"""

    def control(state: AgentState, step: int, world: World) -> ControlAction:
        crosser = world.get(crosser_id)
        accel = speed_tracking_accel(state, target_speed)
        if crosser is not None and state.x < stop_x + 0.5:
            cleared = crosser.y > zone_half_width
            crosser_eta = (-zone_half_width - crosser.y) / max(crosser.v, 0.1)
            ego_clear_time = (zone_half_width - state.x) / max(state.v, 0.1)
            if not cleared and crosser_eta < ego_clear_time + 1.0:
                distance = stop_x - state.x
                if distance <= 0.0:
                    accel = -A_MAX
                else:
                    accel = max(-state.v * state.v / (2.0 * max(distance, 0.25)), -A_MAX)
        return ControlAction(a=accel, w=pure_pursuit_yaw_rate(state, route))

    return control


def snap_action(state: AgentState, action: ControlAction, dt: float) -> ActionToken:
    """Nearest codebook action, nudged so a braking action never reverses the car"""
    token = nearest_token(action)
    ia = token.ia
    while ia < ZERO_INDEX and state.v >= 0.0 and state.v + dequantize(ActionToken.from_indices(ia, token.iw)).a * dt < 0.0:
        ia += 1
    return ActionToken.from_indices(ia, token.iw) if ia != token.ia else token


def simulate_agents(
    initial: Dict[int, AgentState],
    controllers: Dict[int, Controller],
    n_steps: int,
    dt: float,
    in_codebook: bool = True,
) -> Tuple[Dict[int, List[AgentState]], Dict[int, List[int]]]:
    """Advance all agents together; every controller sees the same world at step t"""
    states = {agent_id: [state] for agent_id, state in initial.items()}
    tokens: Dict[int, List[int]] = {agent_id: [] for agent_id in initial}
    for step in range(n_steps - 1):
        world = {agent_id: history[-1] for agent_id, history in states.items()}
        for agent_id in sorted(world):
            current = world[agent_id]
            action = controllers[agent_id](current, step, world)
            if in_codebook:
                token = snap_action(current, action, dt)
                tokens[agent_id].append(token.flat)
                action = dequantize(token)
            states[agent_id].append(ctra_step(current, action, dt))
    return states, tokens


def _offset_polyline(points: np.ndarray, distance: float) -> np.ndarray:
    """Shift a polyline sideways (positive = left of travel direction)"""
    tangent = np.gradient(points, axis=0)
    tangent /= np.hypot(tangent[:, 0], tangent[:, 1])[:, None]
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    return points + distance * normal


def _line(start: Tuple[float, float], end: Tuple[float, float], spacing: float = 1.0) -> np.ndarray:
    length = math.hypot(end[0] - start[0], end[1] - start[1])
    n = max(2, int(math.ceil(length / spacing)) + 1)
    return np.linspace(start, end, n)


def _arc(center: Tuple[float, float], radius: float, start_angle: float, sweep: float, spacing: float = 1.0) -> np.ndarray:
    n = max(2, int(math.ceil(abs(sweep) * radius / spacing)) + 1)
    angles = start_angle + np.linspace(0.0, sweep, n)
    return np.stack([center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)], axis=1)


def _join(*pieces: np.ndarray) -> np.ndarray:
    out = [pieces[0]]
    for piece in pieces[1:]:
        out.append(piece[1:] if np.allclose(piece[0], out[-1][-1]) else piece)
    return np.concatenate(out)


def _points(array: np.ndarray) -> List[Tuple[float, float]]:
    return [(float(x), float(y)) for x, y in np.round(array, 6)]


class _SceneBuilder:
    """Collects polylines, lights and agents for one generated scenario"""

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.polylines: List[MapPolyline] = []
        self.lights: List[TrafficLight] = []
        self.metas: Dict[int, AgentMeta] = {}
        self.initial: Dict[int, AgentState] = {}
        self.controllers: Dict[int, Controller] = {}

    def add_polyline(self, kind: PolylineKind, points: np.ndarray) -> None:
        self.polylines.append(MapPolyline(id=len(self.polylines), kind=kind, points=_points(points)))

    def add_lane(self, center: np.ndarray, with_edges: bool = True) -> Route:
        self.add_polyline(PolylineKind.LANE_CENTER, center)
        if with_edges:
            self.add_polyline(PolylineKind.ROAD_EDGE, _offset_polyline(center, 0.5 * LANE_WIDTH))
            self.add_polyline(PolylineKind.ROAD_EDGE, _offset_polyline(center, -0.5 * LANE_WIDTH))
        return Route(center)

    def speed(self) -> float:
        return round(float(self.rng.uniform(self.config.speed_min, self.config.speed_max)), 3)

    def vehicle(self) -> AgentMeta:
        return AgentMeta(
            id=len(self.metas),
            kind=AgentKind.VEHICLE,
            length=round(float(self.rng.uniform(4.2, 5.0)), 2),
            width=round(float(self.rng.uniform(1.8, 2.0)), 2),
        )

    def add_agent(self, meta: AgentMeta, state: AgentState, controller: Controller) -> int:
        self.metas[meta.id] = meta
        self.initial[meta.id] = state
        self.controllers[meta.id] = controller
        return meta.id

    def on_route(self, route: Route, s: float, v: float) -> AgentState:
        x, y = route.point_at(s)
        return AgentState(x=x, y=y, theta=route.heading_at(s), v=v)

    def build(self, scenario_id: str) -> Scenario:
        config = self.config
        states, tokens = simulate_agents(
            self.initial, self.controllers, config.num_steps, config.dt, in_codebook=config.in_codebook
        )
        tracks = [
            Track(
                meta=self.metas[agent_id],
                states=states[agent_id],
                valid=[True] * config.num_steps,
                gt_tokens=tokens[agent_id] if config.in_codebook else None,
            )
            for agent_id in sorted(self.metas)
        ]
        return Scenario(
            scenario_id=scenario_id,
            dt=config.dt,
            history_len=config.history_len,
            future_len=config.future_len,
            polylines=self.polylines,
            tracks=tracks,
            lights=self.lights,
        )


def _straight_follow(builder: _SceneBuilder) -> None:
    for lane in range(builder.config.lanes):
        y = lane * LANE_WIDTH
        route = builder.add_lane(_line((-50.0, y), (250.0, y), spacing=2.0))
        v = builder.speed()
        start = AgentState(x=float(builder.rng.uniform(-10.0, 10.0)), y=y, theta=0.0, v=v)
        builder.add_agent(builder.vehicle(), start, lane_keeper(route, v))


def _curve_follow(builder: _SceneBuilder) -> None:
    rng = builder.rng
    radius = float(rng.uniform(25.0, 60.0))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    sweep = float(rng.uniform(math.pi / 3, 2 * math.pi / 3))
    for lane in range(builder.config.lanes):
        offset = lane * LANE_WIDTH
        r = radius - sign * offset
        entry = _line((-30.0, offset), (0.0, offset))
        center = (0.0, offset + sign * r)
        arc = _arc(center, r, -sign * math.pi / 2, sign * sweep)
        end_heading = sign * sweep
        exit_end = (arc[-1, 0] + 80.0 * math.cos(end_heading), arc[-1, 1] + 80.0 * math.sin(end_heading))
        route = builder.add_lane(_join(entry, arc, _line(tuple(arc[-1]), exit_end)))
        v = builder.speed()
        start = builder.on_route(route, float(rng.uniform(0.0, 20.0)), v)
        builder.add_agent(builder.vehicle(), start, lane_keeper(route, v))


def _intersection_turn(builder: _SceneBuilder) -> None:
    rng = builder.rng
    turn_radius = 12.0
    approach = _line((-70.0, 0.0), (-10.0, 0.0))
    straight = _line((-10.0, 0.0), (70.0, 0.0))
    left = _join(_arc((-10.0, turn_radius), turn_radius, -math.pi / 2, math.pi / 2), _line((2.0, turn_radius), (2.0, 70.0)))
    right = _join(_arc((-10.0, -turn_radius), turn_radius, math.pi / 2, -math.pi / 2), _line((2.0, -turn_radius), (2.0, -70.0)))
    builder.add_lane(approach)
    for branch in (straight, left, right):
        builder.add_lane(branch, with_edges=False)
    builder.add_polyline(PolylineKind.STOP_LINE, _line((-10.0, -0.5 * LANE_WIDTH), (-10.0, 0.5 * LANE_WIDTH)))
    builder.add_polyline(PolylineKind.CROSSWALK, _line((-13.0, -0.5 * LANE_WIDTH), (-13.0, 0.5 * LANE_WIDTH)))
    builder.lights.append(
        TrafficLight(id=0, stop_point=(-10.0, 0.0), states=[LightState.GREEN] * builder.config.num_steps)
    )
    branch = (straight, left, right)[int(rng.integers(3))]
    route = Route(_join(approach, branch))
    v = builder.speed()
    start = builder.on_route(route, float(rng.uniform(15.0, 35.0)), v)
    builder.add_agent(builder.vehicle(), start, lane_keeper(route, v))


def _car_following(builder: _SceneBuilder) -> None:
    rng = builder.rng
    route = builder.add_lane(_line((-20.0, 0.0), (300.0, 0.0), spacing=2.0))
    follower_meta = builder.vehicle()
    leader_meta = AgentMeta(id=follower_meta.id + 1, kind=AgentKind.VEHICLE, length=4.6, width=1.9)
    v_follow = builder.speed()
    v_lead = max(builder.speed(), 2.0)
    bumper = 0.5 * (follower_meta.length + leader_meta.length)
    gap = 4.0 + 1.5 * v_follow + float(rng.uniform(0.0, 6.0))
    brake_from = int(rng.integers(0, builder.config.num_steps))
    brake_until = brake_from + int(rng.integers(2, 7))
    builder.add_agent(
        follower_meta,
        AgentState(x=0.0, y=0.0, theta=0.0, v=v_follow),
        headway_follower(route, leader_meta.id, bumper, target_speed=v_follow + 2.0),
    )
    builder.add_agent(
        leader_meta,
        AgentState(x=gap + bumper, y=0.0, theta=0.0, v=v_lead),
        braking_leader(route, v_lead, brake_from, brake_until),
    )


def _crossing_conflict(builder: _SceneBuilder) -> None:
    rng = builder.rng
    ego_route = builder.add_lane(_line((-120.0, 0.0), (120.0, 0.0), spacing=2.0))
    cross_route = builder.add_lane(_line((0.0, -120.0), (0.0, 120.0), spacing=2.0))
    ego_meta = builder.vehicle()
    crosser_meta = AgentMeta(id=ego_meta.id + 1, kind=AgentKind.VEHICLE, length=4.6, width=1.9)
    zone = 0.5 * LANE_WIDTH + 0.5 * max(ego_meta.length, crosser_meta.length)
    stop_x = -(zone + 1.0)
    v_ego = round(float(rng.uniform(5.0, 8.0)), 3)
    v_cross = round(float(rng.uniform(5.0, 8.0)), 3)
    x_ego = float(rng.uniform(-40.0, -28.0))
    ego_arrival = -x_ego / v_ego
    cross_arrival = ego_arrival + float(rng.uniform(-1.5, 1.5))
    builder.add_agent(
        ego_meta,
        AgentState(x=x_ego, y=0.0, theta=0.0, v=v_ego),
        yielding_driver(ego_route, crosser_meta.id, v_ego, stop_x, zone),
    )
    builder.add_agent(
        crosser_meta,
        AgentState(x=0.0, y=-v_cross * cross_arrival, theta=math.pi / 2, v=v_cross),
        lane_keeper(cross_route, v_cross),
    )


_BUILDERS: Dict[Archetype, Callable[[_SceneBuilder], None]] = {
    Archetype.STRAIGHT_FOLLOW: _straight_follow,
    Archetype.CURVE_FOLLOW: _curve_follow,
    Archetype.INTERSECTION_TURN: _intersection_turn,
    Archetype.CAR_FOLLOWING: _car_following,
    Archetype.CROSSING_CONFLICT: _crossing_conflict,
}


def generate_scenario(archetype: Archetype, config: GeneratorConfig, rng: np.random.Generator, scenario_id: str) -> Scenario:
    builder = _SceneBuilder(config, rng)
    _BUILDERS[archetype](builder)
    return builder.build(scenario_id)


def generate_synthetic(config: GeneratorConfig, seed: int) -> List[Scenario]:
    """All scenarios of a config, archetype by archetype; each draws from its own child seed"""
    children = np.random.SeedSequence(seed).spawn(config.total)
    scenarios: List[Scenario] = []
    index = 0
    for archetype, count in config.counts():
        for _ in range(count):
            rng = np.random.default_rng(children[index])
            scenario_id = f"{config.id_prefix}-{index:05d}-{archetype.value}"
            scenarios.append(generate_scenario(archetype, config, rng, scenario_id))
            index += 1
    logger.info("generated %d synthetic scenarios (seed %d)", len(scenarios), seed)
    return scenarios


def archetype_of(scenario_id: str) -> Optional[Archetype]:
    for archetype in Archetype:
        if scenario_id.endswith(archetype.value):
            return archetype
    return None

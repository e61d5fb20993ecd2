"""
Evaluation metrics: box collisions, kinematic statistics, collision rates
and minADE over sampled rollouts.
"""

import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from kinesim.core.action_codec import dequantize_flat
from kinesim.core.errors import InvalidArgumentError
from kinesim.core.kinematics import AgentState
from kinesim.rollout import SimulatedScenario
from kinesim.scene import bbox_corners
from kinesim.schemas import AgentMeta, Scenario

logger = logging.getLogger(__name__)

DEFAULT_HORIZONS = (3.0, 5.0, 8.0)


def _edge_axes(corners: np.ndarray) -> np.ndarray:
    # a rectangle has two distinct edge normals
    edges = np.roll(corners, -1, axis=0)[:2] - corners[:2]
    normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def obb_collision(state_a: AgentState, meta_a: AgentMeta, state_b: AgentState, meta_b: AgentMeta) -> bool:
    """Separating-axis test for two oriented rectangles; touching counts as a collision"""
    reach = 0.5 * (math.hypot(meta_a.length, meta_a.width) + math.hypot(meta_b.length, meta_b.width))
    if math.hypot(state_a.x - state_b.x, state_a.y - state_b.y) > reach:
        return False
    corners_a = bbox_corners(state_a, meta_a)
    corners_b = bbox_corners(state_b, meta_b)
    for axis in np.concatenate([_edge_axes(corners_a), _edge_axes(corners_b)]):
        proj_a = corners_a @ axis
        proj_b = corners_b @ axis
        if proj_a.max() < proj_b.min() or proj_b.max() < proj_a.min():
            return False
    return True


def first_collision_step(sim: SimulatedScenario, agent_id: int) -> Optional[int]:
    """First simulated step (1..horizon) at which agent_id overlaps any other agent"""
    metas = {track.agent_id: track.meta for track in sim.base.tracks}
    ego_states = sim.trajectories[agent_id]
    for j in range(1, sim.horizon + 1):
        ego = ego_states[j]
        if ego is None:
            continue
        for other_id, states in sim.trajectories.items():
            if other_id == agent_id or states[j] is None:
                continue
            if obb_collision(ego, metas[agent_id], states[j], metas[other_id]):
                return j
    return None


class KinematicStats(BaseModel):
    mean_speed: float
    mean_abs_accel: float
    mean_abs_jerk: float
    max_abs_jerk: float


def jerk_from_accel(accel: Sequence[float], dt: float) -> np.ndarray:
    return np.diff(np.asarray(accel, dtype=np.float64)) / dt


def kinematic_stats(states: Sequence[AgentState], dt: float, tokens: Optional[Sequence[int]] = None) -> KinematicStats:
    """Speed, acceleration and jerk statistics of one trajectory.

    Accelerations come from the tokens' actions when given, otherwise from
    finite differences of the speed.
    """
    if len(states) < 3:
        raise InvalidArgumentError(f"kinematic statistics need at least 3 states, got {len(states)}")
    speeds = np.array([state.v for state in states])
    if tokens is not None:
        if len(tokens) != len(states) - 1:
            raise InvalidArgumentError("token count must be one less than the state count")
        accel = np.array([dequantize_flat(token).a for token in tokens])
    else:
        accel = np.diff(speeds) / dt
    jerk = jerk_from_accel(accel, dt)
    return KinematicStats(
        mean_speed=float(speeds.mean()),
        mean_abs_accel=float(np.abs(accel).mean()),
        mean_abs_jerk=float(np.abs(jerk).mean()),
        max_abs_jerk=float(np.abs(jerk).max()),
    )


def collision_rate(
    sims: Iterable[SimulatedScenario], horizons: Sequence[float] = DEFAULT_HORIZONS
) -> Dict[float, float]:
    """Per-mille share of (simulation, ego) cases colliding within each horizon in seconds"""
    firsts: List[Tuple[Optional[int], float]] = []
    longest = 0.0
    for sim in sims:
        longest = max(longest, sim.horizon * sim.dt)
        for ego in sim.controlled:
            firsts.append((first_collision_step(sim, ego), sim.dt))
    if firsts and max(horizons) > longest + 1e-9:
        logger.warning("collision horizon %.1f s exceeds the simulated %.1f s", max(horizons), longest)
    rates: Dict[float, float] = {}
    for horizon in horizons:
        hits = sum(1 for step, dt in firsts if step is not None and step * dt <= horizon + 1e-9)
        rates[horizon] = 1000.0 * hits / len(firsts) if firsts else 0.0
    return rates


def ade(trajectory: np.ndarray, ground_truth: np.ndarray, valid: Optional[np.ndarray] = None) -> float:
    """Mean 2D displacement over steps valid in both arrays"""
    trajectory = np.asarray(trajectory, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    mask = np.isfinite(trajectory).all(axis=1) & np.isfinite(ground_truth).all(axis=1)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        return math.nan
    return float(np.hypot(*(trajectory[mask] - ground_truth[mask]).T).mean())


def min_ade(trajectories: Sequence[np.ndarray], ground_truth: np.ndarray, valid: Optional[np.ndarray] = None) -> float:
    if not trajectories:
        raise InvalidArgumentError("min_ade needs at least one rollout")
    return float(np.nanmin([ade(trajectory, ground_truth, valid) for trajectory in trajectories]))


def ground_truth_positions(scenario: Scenario, agent_id: int, start: int, horizon: int) -> np.ndarray:
    """Logged positions for steps start+1 .. start+horizon, NaN where missing"""
    track = scenario.track(agent_id)
    out = np.full((horizon, 2), np.nan)
    for j in range(horizon):
        state = track.state_at(start + 1 + j)
        if state is not None:
            out[j] = (state.x, state.y)
    return out


def simulation_min_ade(sims: Sequence[SimulatedScenario], ground_truth: Scenario, agent_id: int) -> float:
    horizon = min(sim.horizon for sim in sims)
    truth = ground_truth_positions(ground_truth, agent_id, sims[0].start_index, horizon)
    return min_ade([sim.positions(agent_id)[1 : horizon + 1] for sim in sims], truth)


class MetricsReport(BaseModel):
    """Per-ego statistics averaged over all evaluated (simulation, ego) cases"""

    simulations: int = 0
    egos: int = 0
    mean_speed: float = 0.0
    mean_abs_accel: float = 0.0
    mean_abs_jerk: float = 0.0
    max_abs_jerk: float = 0.0
    collision_rate: Dict[str, float] = Field(default_factory=dict)
    min_ade: Optional[float] = None

    @field_validator("collision_rate")
    @classmethod
    def _per_mille(cls, rates: Dict[str, float]) -> Dict[str, float]:
        for key, rate in rates.items():
            if not 0.0 <= rate <= 1000.0:
                raise ValueError(f"collision rate {key} out of range: {rate}")
        return rates


def _horizon_key(horizon: float) -> str:
    return f"{horizon:g}s"


def evaluate_simulations(
    sims: Sequence[SimulatedScenario],
    ground_truth: Optional[Dict[str, Scenario]] = None,
    horizons: Sequence[float] = DEFAULT_HORIZONS,
) -> MetricsReport:
    stats: List[KinematicStats] = []
    for sim in sims:
        for ego in sim.controlled:
            states = [state for state in sim.trajectories[ego] if state is not None]
            tokens = sim.tokens.get(ego)
            if len(states) < 3:
                continue
            usable = tokens if tokens is not None and len(tokens) == len(states) - 1 else None
            stats.append(kinematic_stats(states, sim.dt, usable))

    ade_values: List[float] = []
    if ground_truth:
        grouped: Dict[Tuple[str, int], List[SimulatedScenario]] = defaultdict(list)
        for sim in sims:
            for ego in sim.controlled:
                grouped[(sim.scenario_id, ego)].append(sim)
        for (scenario_id, ego), group in sorted(grouped.items()):
            scenario = ground_truth.get(scenario_id)
            if scenario is None:
                logger.warning("no ground truth for %s", scenario_id)
                continue
            value = simulation_min_ade(group, scenario, ego)
            if math.isfinite(value):
                ade_values.append(value)

    def mean(field_name: str) -> float:
        return float(np.mean([getattr(item, field_name) for item in stats])) if stats else 0.0

    rates = collision_rate(sims, horizons)
    return MetricsReport(
        simulations=len(sims),
        egos=sum(len(sim.controlled) for sim in sims),
        mean_speed=mean("mean_speed"),
        mean_abs_accel=mean("mean_abs_accel"),
        mean_abs_jerk=mean("mean_abs_jerk"),
        max_abs_jerk=mean("max_abs_jerk"),
        collision_rate={_horizon_key(h): rate for h, rate in rates.items()},
        min_ade=float(np.mean(ade_values)) if ade_values else None,
    )


def report_frame(reports: Dict[str, MetricsReport]) -> pd.DataFrame:
    rows = []
    for name, report in reports.items():
        row = {
            "run": name,
            "speed": report.mean_speed,
            "acc": report.mean_abs_accel,
            "jerk": report.mean_abs_jerk,
            "jerk_max": report.max_abs_jerk,
        }
        for key, rate in report.collision_rate.items():
            row[f"coll@{key}"] = rate
        row["minADE"] = report.min_ade if report.min_ade is not None else math.nan
        rows.append(row)
    return pd.DataFrame(rows)


def format_report(reports: Union[MetricsReport, Dict[str, MetricsReport]]) -> str:
    """Aligned-column text table"""
    if isinstance(reports, MetricsReport):
        reports = {"run": reports}
    return report_frame(reports).to_string(index=False, float_format=lambda value: f"{value:.3f}")


def save_report(report: MetricsReport, path: Union[str, Path], name: str = "run") -> Path:
    """Write the report as one JSON line keyed by name.

    Records of other names are kept in order; an earlier record with the same
    name is dropped and the new one goes last.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kept: List[str] = []
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip() and json.loads(line).get("name") != name:
                kept.append(line)
    kept.append(json.dumps({"name": name, **report.model_dump()}))
    path.write_text("\n".join(kept) + "\n", encoding="utf-8")
    logger.info("saved report %s to %s (%d record(s))", name, path, len(kept))
    return path

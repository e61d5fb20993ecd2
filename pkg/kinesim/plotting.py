"""
Static top-down images: map polylines, agent rectangles and trajectories.
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")  # non-interactive backend

import matplotlib.patches as patches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from kinesim.core.kinematics import AgentState  # noqa: E402
from kinesim.rollout import SimulatedScenario  # noqa: E402
from kinesim.scene import bbox_corners  # noqa: E402
from kinesim.schemas import AgentMeta, LightState, PolylineKind, Scenario  # noqa: E402

logger = logging.getLogger(__name__)

POLYLINE_STYLE = {
    PolylineKind.LANE_CENTER: dict(color="tab:gray", linestyle="--", linewidth=0.8, alpha=0.6),
    PolylineKind.ROAD_EDGE: dict(color="black", linestyle="-", linewidth=1.0, alpha=0.7),
    PolylineKind.CROSSWALK: dict(color="tab:olive", linestyle="-", linewidth=1.5, alpha=0.6),
    PolylineKind.STOP_LINE: dict(color="tab:red", linestyle="-", linewidth=1.5, alpha=0.6),
}
LIGHT_COLOR = {
    LightState.RED: "red",
    LightState.YELLOW: "gold",
    LightState.GREEN: "green",
    LightState.UNKNOWN: "lightgray",
}
EGO_COLOR = "tab:red"
BACKGROUND_COLOR = "tab:green"
REPLAY_COLOR = "tab:blue"


def draw_map(ax, scenario: Scenario, step: Optional[int] = None) -> None:
    for polyline in scenario.polylines:
        pts = np.asarray(polyline.points)
        ax.plot(pts[:, 0], pts[:, 1], **POLYLINE_STYLE.get(polyline.kind, {}))
    if step is not None:
        for light in scenario.lights:
            state = light.states[min(step, len(light.states) - 1)]
            ax.scatter([light.stop_point[0]], [light.stop_point[1]], s=30, color=LIGHT_COLOR[state], zorder=4)


def draw_agent(ax, state: AgentState, meta: AgentMeta, color: str, label: Optional[str] = None, alpha: float = 0.8) -> None:
    """Filled rectangle at the agent pose"""
    ax.add_patch(patches.Polygon(bbox_corners(state, meta), closed=True, color=color, alpha=alpha, zorder=3))
    if label is not None:
        ax.text(state.x, state.y, s=label, fontsize=7, color="white", ha="center", va="center", zorder=5)


def _finish(fig, ax, center: Optional[np.ndarray], window: Optional[float], path: Union[str, Path]) -> Path:
    ax.set_aspect("equal")
    if center is not None and window is not None:
        ax.set_xlim(center[0] - window, center[0] + window)
        ax.set_ylim(center[1] - window, center[1] + window)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    logger.debug("wrote %s", path)
    return path


def plot_scenario(scenario: Scenario, path: Union[str, Path], step: Optional[int] = None, window: Optional[float] = None) -> Path:
    """Logged tracks as lines with every present agent drawn at `step` (current step by default)"""
    step = scenario.current_index if step is None else step
    fig, ax = plt.subplots(1, 1, figsize=(8, 8))
    draw_map(ax, scenario, step)
    centers = []
    for track in scenario.tracks:
        xy = np.array([(s.x, s.y) for s, ok in zip(track.states, track.valid) if ok])
        if len(xy):
            ax.plot(xy[:, 0], xy[:, 1], color=REPLAY_COLOR, linewidth=0.8, alpha=0.5)
        state = track.state_at(step)
        if state is not None:
            draw_agent(ax, state, track.meta, REPLAY_COLOR, label=str(track.agent_id))
            centers.append((state.x, state.y))
    ax.set_title(f"{scenario.scenario_id} step {step}")
    center = np.mean(centers, axis=0) if centers else None
    return _finish(fig, ax, center, window, path)


def plot_simulations(
    sims: Sequence[SimulatedScenario],
    path: Union[str, Path],
    window: Optional[float] = None,
    show_ground_truth: bool = True,
) -> Path:
    """Overlay rollouts of one scene: driven agents' paths, final boxes and the logged ego future"""
    if not sims:
        raise ValueError("nothing to plot")
    base = sims[0]
    scenario = base.base
    metas = {track.agent_id: track.meta for track in scenario.tracks}
    fig, ax = plt.subplots(1, 1, figsize=(8, 8))
    draw_map(ax, scenario, base.start_index + base.horizon)

    for agent_id, states in base.trajectories.items():
        if agent_id in base.controlled or agent_id in base.background:
            continue
        present = [s for s in states if s is not None]
        if present:
            xy = np.array([(s.x, s.y) for s in present])
            ax.plot(xy[:, 0], xy[:, 1], color=REPLAY_COLOR, linewidth=1.0, alpha=0.6)
            draw_agent(ax, present[-1], metas[agent_id], REPLAY_COLOR, alpha=0.5)

    for sim in sims:
        for agent_id in sim.controlled + sim.background:
            color = EGO_COLOR if agent_id in sim.controlled else BACKGROUND_COLOR
            xy = sim.positions(agent_id)
            ax.plot(xy[:, 0], xy[:, 1], color=color, linewidth=1.0, alpha=max(0.15, 1.0 / len(sims)))

    for agent_id in base.controlled + base.background:
        color = EGO_COLOR if agent_id in base.controlled else BACKGROUND_COLOR
        first = base.trajectories[agent_id][0]
        if first is not None:
            draw_agent(ax, first, metas[agent_id], color, label=str(agent_id))
        if show_ground_truth and agent_id in base.controlled:
            track = scenario.track(agent_id)
            truth = [track.state_at(t) for t in range(base.start_index, min(scenario.num_steps, base.start_index + base.horizon + 1))]
            xy = np.array([(s.x, s.y) for s in truth if s is not None])
            if len(xy):
                ax.plot(xy[:, 0], xy[:, 1], color="black", linestyle=":", linewidth=1.2, label="log")

    ax.set_title(f"{base.scenario_id}: {len(sims)} rollout(s), {base.sampler}")
    start = base.trajectories[base.controlled[0]][0] if base.controlled else None
    center = np.array([start.x, start.y]) if start is not None else None
    return _finish(fig, ax, center, window, path)


def plot_loss_curve(curves: Union[pd.DataFrame, Dict[str, pd.DataFrame]], path: Union[str, Path]) -> Path:
    """Train/validation CE per epoch; several runs share one axis"""
    if isinstance(curves, pd.DataFrame):
        curves = {"run": curves}
    fig, ax = plt.subplots(1, 1, figsize=(7, 4))
    for name, curve in curves.items():
        ax.plot(curve["epoch"], curve["train_ce"], label=f"{name} train")
        if "val_ce" in curve and curve["val_ce"].notna().any():
            ax.plot(curve["epoch"], curve["val_ce"], linestyle="--", label=f"{name} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.legend(fontsize=7)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def group_by_scene(sims: Iterable[SimulatedScenario]) -> Dict[str, List[SimulatedScenario]]:
    grouped: Dict[str, List[SimulatedScenario]] = {}
    for sim in sims:
        grouped.setdefault(sim.scenario_id, []).append(sim)
    for group in grouped.values():
        group.sort(key=lambda sim: sim.sample_index)
    return grouped

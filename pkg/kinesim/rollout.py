"""
Reactive closed-loop simulation.

Each step, every model-controlled agent sees the same world snapshot in its
own frame, the full temporal context is re-encoded, one token per agent is
sampled, and only then does the world advance: controlled agents through the
transition model, replayed agents from the log.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from kinesim.core.action_codec import START_TOKEN, dequantize_flat
from kinesim.core.config import progress_enabled
from kinesim.core.errors import InvalidArgumentError, MissingReplayStateError, ScenarioParseError
from kinesim.core.kinematics import CTRA, AgentState, TransitionModel
from kinesim.network import KinematicTokenModel, ModelConfig, StepFeatures, collate_steps, featurize_step
from kinesim.sampling import Sampler, parse_sampler, spawn_rngs
from kinesim.scenario_io import load_scenario, save_scenario
from kinesim.scene import MapIndex, SceneStepInput, WorldSnapshot, build_step_input_from_snapshot, snapshot_at
from kinesim.schemas import Scenario, Track
from kinesim.tokenizer import tokenize_track

logger = logging.getLogger(__name__)

StepHook = Callable[[int, Dict[int, SceneStepInput]], None]


class RolloutConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    horizon: int = Field(default=16, ge=0)
    sampler: str = "argmax"
    controlled: Optional[List[int]] = None
    replayed: Optional[List[int]] = None
    background: List[int] = Field(default_factory=list)
    seed: int = 0
    samples: int = Field(default=1, ge=1)
    window: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _disjoint(self) -> "RolloutConfig":
        parse_sampler(self.sampler)
        controlled = set(self.controlled or [])
        replayed = set(self.replayed or [])
        background = set(self.background)
        if controlled & replayed or controlled & background or replayed & background:
            raise ValueError("controlled, replayed and background agent sets must be disjoint")
        return self


class SimulatedScenario(BaseModel):
    """A rollout from the scenario's current step.

    trajectories[id][j] is the agent's state at step start_index + j (None
    when absent); tokens[id][j] is the action a model chose at that step.
    """

    base: Scenario
    start_index: int
    horizon: int
    controlled: List[int]
    background: List[int] = Field(default_factory=list)
    trajectories: Dict[int, List[Optional[AgentState]]]
    tokens: Dict[int, List[int]]
    sampler: str = "argmax"
    seed: int = 0
    sample_index: int = 0

    @property
    def scenario_id(self) -> str:
        return self.base.scenario_id

    @property
    def dt(self) -> float:
        return self.base.dt

    def positions(self, agent_id: int) -> np.ndarray:
        """(horizon+1, 2) positions, NaN where the agent is absent"""
        out = np.full((self.horizon + 1, 2), np.nan)
        for j, state in enumerate(self.trajectories[agent_id]):
            if state is not None:
                out[j] = (state.x, state.y)
        return out

    def is_feasible(self, transition: TransitionModel = CTRA) -> bool:
        """Every model-chosen token connects consecutive states bit-exactly"""
        for agent_id, tokens in self.tokens.items():
            states = self.trajectories[agent_id]
            for j, token in enumerate(tokens):
                if states[j] is None or states[j + 1] is None:
                    return False
                if transition.step(states[j], dequantize_flat(token), self.dt) != states[j + 1]:
                    return False
        return True

    def to_scenario(self) -> Scenario:
        """Logged history up to start_index followed by the simulated future"""
        base = self.base
        tracks = []
        for track in base.tracks:
            simulated = self.trajectories.get(track.agent_id)
            states = list(track.states[: self.start_index + 1])
            valid = list(track.valid[: self.start_index + 1])
            for j in range(1, self.horizon + 1):
                state = simulated[j] if simulated is not None else None
                if state is None:
                    states.append(states[-1])
                    valid.append(False)
                else:
                    states.append(state)
                    valid.append(True)
            tracks.append(Track(meta=track.meta, states=states, valid=valid))
        lights = []
        for light in base.lights:
            light_states = list(light.states[: self.start_index + 1])
            for j in range(1, self.horizon + 1):
                step = self.start_index + j
                light_states.append(light.states[min(step, base.num_steps - 1)])
            lights.append(light.model_copy(update={"states": light_states}))
        return Scenario(
            scenario_id=base.scenario_id,
            dt=base.dt,
            history_len=self.start_index,
            future_len=self.horizon,
            polylines=base.polylines,
            tracks=tracks,
            lights=lights,
        )


def default_controlled(scenario: Scenario, step: Optional[int] = None) -> List[int]:
    """Lowest-id agent present at the current step"""
    step = scenario.current_index if step is None else step
    present = [track.agent_id for track in scenario.tracks if track.is_valid(step)]
    if not present:
        raise InvalidArgumentError(f"scenario {scenario.scenario_id} has no agent present at step {step}")
    return [min(present)]


def step_world(
    scenario: Scenario,
    snapshot: WorldSnapshot,
    tokens: Dict[int, int],
    replayed: Sequence[int],
    transition: TransitionModel = CTRA,
) -> WorldSnapshot:
    """Advance all agents at once: token-driven agents by the transition model, replayed agents by the log"""
    t = snapshot.step
    missing = [agent_id for agent_id in tokens if agent_id not in snapshot.agents]
    if missing:
        raise InvalidArgumentError(f"agents {missing} have tokens but are not present at step {t}")
    agents: Dict[int, Tuple[AgentState, object]] = {}
    for agent_id in sorted(tokens):
        state, meta = snapshot.agents[agent_id]
        agents[agent_id] = (transition.step(state, dequantize_flat(tokens[agent_id]), scenario.dt), meta)
    for agent_id in sorted(replayed):
        if agent_id in tokens:
            continue
        if t + 1 >= scenario.num_steps:
            raise MissingReplayStateError(agent_id, t + 1)
        track = scenario.track(agent_id)
        state = track.state_at(t + 1)
        if state is not None:
            agents[agent_id] = (state, track.meta)
    next_step = min(t + 1, scenario.num_steps - 1)
    lights = [(light.stop_point, light.states[next_step]) for light in scenario.lights]
    return WorldSnapshot(step=t + 1, agents=agents, lights=lights)


class AgentContext:
    """Per-agent temporal context: cached step features and chosen tokens"""

    def __init__(self, agent_id: int, first_step: int):
        self.agent_id = agent_id
        self.first_step = first_step
        self.features: List[StepFeatures] = []
        self.tokens: List[int] = []

    def prev_token(self) -> int:
        return self.tokens[-1] if self.tokens else START_TOKEN


def history_context(
    scenario: Scenario,
    agent_id: int,
    map_index: MapIndex,
    model_config: ModelConfig,
    window: int,
) -> AgentContext:
    """Encode the logged history [first valid step, current) with tokenizer actions"""
    track = scenario.track(agent_id)
    t0 = scenario.current_index
    first = next(t for t in range(t0 + 1) if track.is_valid(t))
    context = AgentContext(agent_id, first)
    if first == t0:
        return context
    tokenized = tokenize_track(track.states[first : t0 + 1], scenario.dt, k=window, valid=track.valid[first : t0 + 1])
    for offset, token in enumerate(tokenized.flat_tokens):
        step = first + offset
        snapshot = snapshot_at(scenario, step)
        if agent_id not in snapshot.agents:
            agents = dict(snapshot.agents)
            agents[agent_id] = (tokenized.ctl_states[offset], track.meta)
            snapshot = WorldSnapshot(step=step, agents=agents, lights=snapshot.lights)
        step_input = build_step_input_from_snapshot(snapshot, map_index, agent_id, prev_token=context.prev_token())
        context.features.append(featurize_step(step_input, model_config))
        context.tokens.append(token)
    return context


@torch.no_grad()
def _next_logits(model: KinematicTokenModel, contexts: Sequence[AgentContext]) -> np.ndarray:
    """Logits after the last step of each context, one forward pass for all agents"""
    window = model.config.max_steps
    sequences = [context.features[-window:] for context in contexts]
    logits = model(collate_steps(sequences))
    last = torch.tensor([len(seq) - 1 for seq in sequences])
    return logits[torch.arange(len(sequences)), last].numpy()


def closed_loop(
    scenario: Scenario,
    model: KinematicTokenModel,
    config: RolloutConfig,
    rng: Optional[np.random.Generator] = None,
    sample_index: int = 0,
    background_model: Optional[KinematicTokenModel] = None,
    on_step_inputs: Optional[StepHook] = None,
    transition: TransitionModel = CTRA,
) -> SimulatedScenario:
    """Roll the scenario forward from its current step for config.horizon steps"""
    t0 = scenario.current_index
    controlled = sorted(config.controlled) if config.controlled else default_controlled(scenario)
    background = sorted(config.background)
    if background and background_model is None:
        raise InvalidArgumentError("background agents need a background model")
    driven = controlled + background
    for agent_id in driven:
        if not scenario.track(agent_id).is_valid(t0):
            raise InvalidArgumentError(f"agent {agent_id} is not present at the current step {t0}")
    if config.replayed is None:
        replayed = [agent_id for agent_id in scenario.agent_ids if agent_id not in driven]
    else:
        replayed = sorted(config.replayed)

    sampler: Sampler = parse_sampler(config.sampler)
    rng = rng if rng is not None else spawn_rngs(config.seed, 1)[0]
    model.eval()
    if background_model is not None:
        background_model.eval()

    snapshot = snapshot_at(scenario, t0)
    trajectories: Dict[int, List[Optional[AgentState]]] = {
        agent_id: [snapshot.agents[agent_id][0] if agent_id in snapshot.agents else None] for agent_id in scenario.agent_ids
    }
    chosen: Dict[int, List[int]] = {agent_id: [] for agent_id in driven}

    if config.horizon > 0:
        map_index = MapIndex.from_scenario(scenario)
        groups = [(model, controlled)]
        if background:
            groups.append((background_model, background))
        contexts = {
            agent_id: history_context(scenario, agent_id, map_index, group_model.config, config.window)
            for group_model, ids in groups
            for agent_id in ids
        }
        for t in range(t0, t0 + config.horizon):
            inputs: Dict[int, SceneStepInput] = {}
            for agent_id in driven:
                if agent_id not in snapshot.agents:
                    continue
                step_input = build_step_input_from_snapshot(
                    snapshot, map_index, agent_id, prev_token=contexts[agent_id].prev_token()
                )
                inputs[agent_id] = step_input
            if on_step_inputs is not None:
                on_step_inputs(t, inputs)

            tokens: Dict[int, int] = {}
            for group_model, ids in groups:
                active = [agent_id for agent_id in ids if agent_id in inputs]
                if not active:
                    continue
                for agent_id in active:
                    contexts[agent_id].features.append(featurize_step(inputs[agent_id], group_model.config))
                logits = _next_logits(group_model, [contexts[agent_id] for agent_id in active])
                for agent_id, row in zip(active, logits):
                    tokens[agent_id] = sampler(row, rng)
            for agent_id in sorted(tokens):
                contexts[agent_id].tokens.append(tokens[agent_id])
                chosen[agent_id].append(tokens[agent_id])

            snapshot = step_world(scenario, snapshot, tokens, replayed, transition)
            for agent_id in scenario.agent_ids:
                entry = snapshot.agents.get(agent_id)
                trajectories[agent_id].append(entry[0] if entry is not None else None)

    return SimulatedScenario(
        base=scenario,
        start_index=t0,
        horizon=config.horizon,
        controlled=controlled,
        background=background,
        trajectories=trajectories,
        tokens=chosen,
        sampler=sampler.spec(),
        seed=config.seed,
        sample_index=sample_index,
    )


def batch_rollouts(
    scenario: Scenario,
    model: KinematicTokenModel,
    config: RolloutConfig,
    background_model: Optional[KinematicTokenModel] = None,
) -> List[SimulatedScenario]:
    """config.samples independent rollouts; rollout k uses child seed k of config.seed"""
    rngs = spawn_rngs(config.seed, config.samples)
    return [
        closed_loop(scenario, model, config, rng=rng, sample_index=k, background_model=background_model)
        for k, rng in enumerate(tqdm(rngs, desc=f"rollouts {scenario.scenario_id}", disable=not progress_enabled() or len(rngs) < 8))
    ]


class SimulationLog(BaseModel):
    """Sidecar record written next to a simulated scenario file"""

    scenario_id: str
    start_index: int
    horizon: int
    controlled: List[int]
    background: List[int] = Field(default_factory=list)
    tokens: Dict[int, List[int]]
    sampler: str
    seed: int
    sample_index: int


def simulation_stem(sim: SimulatedScenario) -> str:
    return f"{sim.scenario_id}-s{sim.sample_index:03d}"


def save_simulation(sim: SimulatedScenario, directory: Union[str, Path]) -> Tuple[Path, Path]:
    directory = Path(directory)
    stem = simulation_stem(sim)
    scenario_file = save_scenario(sim.to_scenario(), directory / f"{stem}.scn.jsonl")
    log = SimulationLog(
        scenario_id=sim.scenario_id,
        start_index=sim.start_index,
        horizon=sim.horizon,
        controlled=sim.controlled,
        background=sim.background,
        tokens=sim.tokens,
        sampler=sim.sampler,
        seed=sim.seed,
        sample_index=sim.sample_index,
    )
    sidecar = directory / f"{stem}.tokens.json"
    sidecar.write_text(log.model_dump_json() + "\n", encoding="utf-8")
    return scenario_file, sidecar


def load_simulation(scenario_file: Union[str, Path]) -> SimulatedScenario:
    """Inverse of save_simulation; base becomes the saved history plus simulated future"""
    scenario_file = Path(scenario_file)
    sidecar = scenario_file.with_name(scenario_file.name.replace(".scn.jsonl", ".tokens.json"))
    scenario = load_scenario(scenario_file)
    try:
        log = SimulationLog.model_validate_json(sidecar.read_text(encoding="utf-8"))
    except (OSError, ValidationError) as exc:
        raise ScenarioParseError(str(sidecar), 1, f"unreadable token log ({exc})") from exc
    trajectories = {
        track.agent_id: [track.state_at(log.start_index + j) for j in range(log.horizon + 1)] for track in scenario.tracks
    }
    return SimulatedScenario(
        base=scenario,
        start_index=log.start_index,
        horizon=log.horizon,
        controlled=log.controlled,
        background=log.background,
        trajectories=trajectories,
        tokens=log.tokens,
        sampler=log.sampler,
        seed=log.seed,
        sample_index=log.sample_index,
    )


def load_simulations_dir(directory: Union[str, Path]) -> List[SimulatedScenario]:
    return [load_simulation(path) for path in sorted(Path(directory).glob("*.scn.jsonl"))]

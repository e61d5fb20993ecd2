"""
Driving-habit customization by preference fine-tuning.

Pairs come from K rollouts of one ego with the other agents replayed: a
collision-free rollout (chosen per driver profile) wins over a colliding one.
The policy is then pushed to raise the winner's log-likelihood relative to a
frozen copy of the pretrained model.
"""

import copy
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from kinesim.core.action_codec import dequantize_flat
from kinesim.core.config import progress_enabled
from kinesim.core.errors import (
    EmptyDatasetError,
    InvalidArgumentError,
    MissingReplayStateError,
    NonFiniteGradientError,
    ScenarioParseError,
    TrainingDivergedError,
)
from kinesim.core.kinematics import ctra_step
from kinesim.metrics import first_collision_step, kinematic_stats
from kinesim.network import KinematicTokenModel, ModelConfig, StepFeatures, collate_steps, featurize_step
from kinesim.rollout import SimulatedScenario, history_context
from kinesim.scene import MapIndex, WorldSnapshot, build_step_input_from_snapshot, snapshot_at
from kinesim.schemas import PairRecord, Scenario
from kinesim.training import check_gradients_finite

logger = logging.getLogger(__name__)


class DriverProfile(str, Enum):
    SAFETY = "safety"
    FAST = "fast"
    COMFORT = "comfort"


class PreferencePair(BaseModel):
    scenario: Scenario
    agent_id: int
    start_index: int
    profile: DriverProfile
    winner: List[int]
    loser: List[int]

    @model_validator(mode="after")
    def _distinct(self) -> "PreferencePair":
        if self.winner == self.loser:
            raise ValueError("winner and loser sequences must differ")
        return self

    def to_record(self) -> PairRecord:
        return PairRecord(
            scenario_id=self.scenario.scenario_id,
            agent_id=self.agent_id,
            start_index=self.start_index,
            profile=self.profile.value,
            winner=self.winner,
            loser=self.loser,
        )


class DPOConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: float = Field(default=1.0, gt=0)
    lr: float = Field(default=1e-5, gt=0)
    steps: int = Field(default=50, ge=1)
    batch_size: int = Field(default=16, ge=1)
    seed: int = 0
    window: int = Field(default=3, ge=1)


def _mean_speed(sim: SimulatedScenario, agent_id: int) -> float:
    speeds = [state.v for state in sim.trajectories[agent_id][1:] if state is not None]
    return float(np.mean(speeds)) if speeds else 0.0


def _max_jerk(sim: SimulatedScenario, agent_id: int) -> float:
    states = [state for state in sim.trajectories[agent_id] if state is not None]
    if len(states) < 3:
        return 0.0
    tokens = sim.tokens.get(agent_id)
    usable = tokens if tokens is not None and len(tokens) == len(states) - 1 else None
    return kinematic_stats(states, sim.dt, usable).max_abs_jerk


def build_pairs(
    rollouts: Sequence[SimulatedScenario],
    profile: Union[DriverProfile, str],
    agent_id: Optional[int] = None,
) -> List[PreferencePair]:
    """At most one pair per rollout set: a profile-selected safe rollout beats the earliest collision"""
    if not rollouts:
        return []
    profile = DriverProfile(profile)
    ego = rollouts[0].controlled[0] if agent_id is None else agent_id
    collisions = [first_collision_step(sim, ego) for sim in rollouts]
    safe = [i for i, step in enumerate(collisions) if step is None]
    colliding = [i for i, step in enumerate(collisions) if step is not None]
    if not safe or not colliding:
        return []

    loser = min(colliding, key=lambda i: (collisions[i], i))
    if profile is DriverProfile.SAFETY:
        winner = safe[0]
    elif profile is DriverProfile.FAST:
        winner = min(safe, key=lambda i: (-_mean_speed(rollouts[i], ego), i))
    else:
        winner = min(safe, key=lambda i: (_max_jerk(rollouts[i], ego), i))

    winner_tokens = list(rollouts[winner].tokens[ego])
    loser_tokens = list(rollouts[loser].tokens[ego])
    if winner_tokens == loser_tokens:
        return []
    return [
        PreferencePair(
            scenario=rollouts[winner].base,
            agent_id=ego,
            start_index=rollouts[winner].start_index,
            profile=profile,
            winner=winner_tokens,
            loser=loser_tokens,
        )
    ]


def conditioning_features(
    model_config: ModelConfig,
    scenario: Scenario,
    agent_id: int,
    tokens: Sequence[int],
    window: int = 3,
    map_index: Optional[MapIndex] = None,
) -> Tuple[List[StepFeatures], int]:
    """Step features the rollout would have produced while emitting tokens.

    The ego's future states are rebuilt from the tokens with the transition
    model; every other agent follows its log. Returns the features and the
    index of the first future step.
    """
    map_index = map_index or MapIndex.from_scenario(scenario)
    t0 = scenario.current_index
    track = scenario.track(agent_id)
    state = track.state_at(t0)
    if state is None:
        raise InvalidArgumentError(f"agent {agent_id} is not present at the current step {t0}")
    if t0 + len(tokens) > scenario.num_steps - 1:
        raise MissingReplayStateError(agent_id, scenario.num_steps)

    context = history_context(scenario, agent_id, map_index, model_config, window)
    features = list(context.features)
    prev = context.prev_token()
    for j, token in enumerate(tokens):
        logged = snapshot_at(scenario, t0 + j)
        agents = {other: entry for other, entry in logged.agents.items() if other != agent_id}
        agents[agent_id] = (state, track.meta)
        snapshot = WorldSnapshot(step=t0 + j, agents=agents, lights=logged.lights)
        step_input = build_step_input_from_snapshot(snapshot, map_index, agent_id, prev_token=prev)
        features.append(featurize_step(step_input, model_config))
        prev = int(token)
        state = ctra_step(state, dequantize_flat(token), scenario.dt)
    return features, len(context.features)


@dataclass
class PreparedPair:
    """A pair with its conditioning features computed once"""

    pair: PreferencePair
    winner_features: List[StepFeatures]
    loser_features: List[StepFeatures]
    offset: int


def prepare_pairs(model_config: ModelConfig, pairs: Iterable[PreferencePair], window: int = 3) -> List[PreparedPair]:
    prepared = []
    maps: Dict[str, MapIndex] = {}
    for pair in pairs:
        map_index = maps.setdefault(pair.scenario.scenario_id, MapIndex.from_scenario(pair.scenario))
        winner, offset = conditioning_features(model_config, pair.scenario, pair.agent_id, pair.winner, window, map_index)
        loser, _ = conditioning_features(model_config, pair.scenario, pair.agent_id, pair.loser, window, map_index)
        prepared.append(PreparedPair(pair=pair, winner_features=winner, loser_features=loser, offset=offset))
    return prepared


def batch_logprob(
    model: KinematicTokenModel,
    sequences: Sequence[List[StepFeatures]],
    offsets: Sequence[int],
    tokens: Sequence[Sequence[int]],
) -> torch.Tensor:
    """(B,) summed log-probabilities of each token sequence, one causal forward pass"""
    logits = model(collate_steps(sequences))
    log_probs = F.log_softmax(logits, dim=-1)
    totals = []
    for b, (offset, seq) in enumerate(zip(offsets, tokens)):
        positions = torch.arange(offset, offset + len(seq))
        picked = log_probs[b, positions, torch.tensor(list(seq), dtype=torch.long)]
        totals.append(picked.sum())
    return torch.stack(totals)


def seq_logprob(
    model: KinematicTokenModel,
    scenario: Scenario,
    agent_id: int,
    tokens: Sequence[int],
    window: int = 3,
) -> torch.Tensor:
    """log p(tokens | scenario context) under rollout-consistent conditioning"""
    features, offset = conditioning_features(model.config, scenario, agent_id, tokens, window)
    if not tokens:
        return torch.zeros((), dtype=torch.float64)
    return batch_logprob(model, [features], [offset], [tokens])[0]


def dpo_loss(
    policy_winner: torch.Tensor,
    policy_loser: torch.Tensor,
    ref_winner: torch.Tensor,
    ref_loser: torch.Tensor,
    beta: float = 1.0,
) -> torch.Tensor:
    """Mean of -log sigmoid(beta * ((pw - rw) - (pl - rl)))"""
    if beta <= 0:
        raise InvalidArgumentError(f"beta must be positive, got {beta}")
    margin = (policy_winner - ref_winner) - (policy_loser - ref_loser)
    return -F.logsigmoid(beta * margin).mean()


def _pair_logprobs(model: KinematicTokenModel, prepared: Sequence[PreparedPair]) -> Tuple[torch.Tensor, torch.Tensor]:
    offsets = [item.offset for item in prepared]
    winners = batch_logprob(model, [item.winner_features for item in prepared], offsets, [item.pair.winner for item in prepared])
    losers = batch_logprob(model, [item.loser_features for item in prepared], offsets, [item.pair.loser for item in prepared])
    return winners, losers


def pairs_dpo_loss(
    policy: KinematicTokenModel,
    reference: KinematicTokenModel,
    prepared: Sequence[PreparedPair],
    beta: float = 1.0,
) -> torch.Tensor:
    with torch.no_grad():
        ref_w, ref_l = _pair_logprobs(reference, prepared)
    pol_w, pol_l = _pair_logprobs(policy, prepared)
    return dpo_loss(pol_w, pol_l, ref_w, ref_l, beta)


@torch.no_grad()
def preference_margin(
    policy: KinematicTokenModel, reference: KinematicTokenModel, prepared: Sequence[PreparedPair]
) -> float:
    """Mean implicit reward margin (delta_w - delta_l) over the pairs"""
    if not prepared:
        raise EmptyDatasetError("no preference pairs")
    pol_w, pol_l = _pair_logprobs(policy, prepared)
    ref_w, ref_l = _pair_logprobs(reference, prepared)
    return float(((pol_w - ref_w) - (pol_l - ref_l)).mean())


def dpo_finetune(
    pretrained: KinematicTokenModel,
    pairs: Sequence[PreferencePair],
    config: DPOConfig,
) -> Tuple[KinematicTokenModel, pd.DataFrame]:
    """Constant-LR Adam on the preference loss; pretrained stays untouched as the reference"""
    if not pairs:
        raise EmptyDatasetError("preference fine-tuning needs at least one pair")
    reference = pretrained
    reference.eval()
    policy = copy.deepcopy(pretrained)
    policy.eval()
    for parameter in reference.parameters():
        parameter.requires_grad_(False)
    for parameter in policy.parameters():
        parameter.requires_grad_(True)

    prepared = prepare_pairs(policy.config, pairs, config.window)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.lr)
    rows = []
    for step in tqdm(range(1, config.steps + 1), desc="dpo", disable=not progress_enabled()):
        picks = torch.randperm(len(prepared), generator=generator)[: config.batch_size].tolist()
        batch = [prepared[i] for i in picks]
        optimizer.zero_grad(set_to_none=True)
        loss = pairs_dpo_loss(policy, reference, batch, config.beta)
        if not torch.isfinite(loss):
            raise TrainingDivergedError("preference loss became non-finite", {"step": step})
        loss.backward()
        try:
            check_gradients_finite(policy)
        except NonFiniteGradientError as exc:
            raise TrainingDivergedError(str(exc), {"step": step, "parameter": exc.parameter}) from exc
        optimizer.step()
        rows.append({"step": step, "loss": float(loss)})
    for parameter in reference.parameters():
        parameter.requires_grad_(True)

    history = pd.DataFrame(rows, columns=["step", "loss"])
    margin = preference_margin(policy, reference, prepared)
    logger.info("preference fine-tune: %d pairs, final loss %.4f, margin %.4f", len(prepared), rows[-1]["loss"], margin)
    return policy, history


def save_pairs(pairs: Iterable[PreferencePair], path: Union[str, Path]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for pair in pairs:
            handle.write(pair.to_record().model_dump_json() + "\n")
            count += 1
    return count


def load_pair_records(path: Union[str, Path]) -> List[PairRecord]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(PairRecord.model_validate_json(line))
            except ValidationError as exc:
                raise ScenarioParseError(str(path), line_no, exc.errors()[0].get("msg", "invalid pair record")) from exc
    return records


def resolve_pairs(records: Iterable[PairRecord], scenarios: Dict[str, Scenario]) -> List[PreferencePair]:
    """Attach each record's scenario; records whose scenario is unknown are skipped"""
    pairs = []
    for record in records:
        scenario = scenarios.get(record.scenario_id)
        if scenario is None:
            logger.warning("pair references unknown scenario %s", record.scenario_id)
            continue
        if record.start_index != scenario.current_index:
            logger.warning("pair for %s starts at %d, scenario current step is %d", record.scenario_id, record.start_index, scenario.current_index)
            continue
        pairs.append(
            PreferencePair(
                scenario=scenario,
                agent_id=record.agent_id,
                start_index=record.start_index,
                profile=DriverProfile(record.profile),
                winner=record.winner,
                loser=record.loser,
            )
        )
    return pairs


def load_pairs(path: Union[str, Path], scenarios: Dict[str, Scenario]) -> List[PreferencePair]:
    return resolve_pairs(load_pair_records(path), scenarios)

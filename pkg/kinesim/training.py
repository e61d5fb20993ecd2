"""
Teacher-forced training of the kinematic-token network.

A training sequence is one tokenized track: step t is the scene at logged
step t seen from the agent (prev token = action t-1) and its label is action
t. Inputs always come from the logs, never from model rollouts.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from kinesim.core.action_codec import START_TOKEN, ActionToken
from kinesim.core.config import progress_enabled
from kinesim.core.errors import (
    EmptyDatasetError,
    InvalidArgumentError,
    KinesimError,
    NonFiniteGradientError,
    TrainingDivergedError,
)
from kinesim.core.kinematics import AgentState
from kinesim.network import (
    KinematicTokenModel,
    ModelConfig,
    StepBatch,
    StepFeatures,
    build_model,
    collate_steps,
    featurize_step,
)
from kinesim.scene import MapIndex, SceneStepInput, WorldSnapshot, build_step_input_from_snapshot, snapshot_at
from kinesim.schemas import Scenario, TokenRecord
from kinesim.tokenizer import detokenize

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=256, ge=1)
    lr: float = Field(default=2e-4, gt=0)
    pct_start: float = Field(default=0.3, gt=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    seed: int = 0
    workers: int = Field(default=1, ge=1)


@dataclass
class SequenceExample:
    scenario_id: str
    agent_id: int
    features: List[StepFeatures]
    targets: List[int]
    loss_mask: List[bool]


@dataclass
class TrainResult:
    model: KinematicTokenModel
    curve: pd.DataFrame
    final_train_ce: float
    final_val_ce: Optional[float]
    metadata: Dict[str, Any] = field(default_factory=dict)


def _with_agent(snapshot: WorldSnapshot, agent_id: int, state: AgentState, meta) -> WorldSnapshot:
    agents = dict(snapshot.agents)
    agents[agent_id] = (state, meta)
    return WorldSnapshot(step=snapshot.step, agents=agents, lights=snapshot.lights)


def teacher_forced_inputs(
    scenario: Scenario,
    record: TokenRecord,
    map_index: Optional[MapIndex] = None,
    max_steps: Optional[int] = None,
) -> Tuple[List[SceneStepInput], List[int], List[bool]]:
    """Step inputs, labels and loss mask of one tokenized track.

    Steps where the agent's own log is invalid use the state reconstructed
    from its tokens and are excluded from the loss.
    """
    map_index = map_index or MapIndex.from_scenario(scenario)
    track = scenario.track(record.agent_id)
    tokens = list(record.tokens)
    if max_steps is not None:
        tokens = tokens[:max_steps]
    reconstructed = [AgentState.from_array(record.initial_state)] + detokenize(
        AgentState.from_array(record.initial_state), [ActionToken.from_flat(tok) for tok in tokens], record.dt
    )

    inputs: List[SceneStepInput] = []
    mask: List[bool] = []
    for t in range(len(tokens)):
        snapshot = snapshot_at(scenario, t)
        if record.agent_id not in snapshot.agents:
            snapshot = _with_agent(snapshot, record.agent_id, reconstructed[t], track.meta)
        prev = START_TOKEN if t == 0 else tokens[t - 1]
        inputs.append(build_step_input_from_snapshot(snapshot, map_index, record.agent_id, prev_token=prev))
        mask.append(track.is_valid(t) and track.is_valid(t + 1))
    return inputs, tokens, mask


def build_examples(
    scenarios: Dict[str, Scenario],
    records: Iterable[TokenRecord],
    model_config: ModelConfig,
) -> List[SequenceExample]:
    maps: Dict[str, MapIndex] = {}
    examples: List[SequenceExample] = []
    missing = 0
    for record in records:
        scenario = scenarios.get(record.scenario_id)
        if scenario is None or not record.tokens:
            missing += 1
            continue
        map_index = maps.setdefault(record.scenario_id, MapIndex.from_scenario(scenario))
        inputs, targets, mask = teacher_forced_inputs(scenario, record, map_index, model_config.max_steps)
        examples.append(
            SequenceExample(
                scenario_id=record.scenario_id,
                agent_id=record.agent_id,
                features=[featurize_step(step, model_config) for step in inputs],
                targets=targets,
                loss_mask=mask,
            )
        )
    if missing:
        logger.warning("%d token record(s) had no matching scenario or no tokens", missing)
    return examples


class SequenceDataset(Dataset):
    def __init__(self, examples: Sequence[SequenceExample]):
        self.examples = list(examples)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, index: int) -> SequenceExample:
        return self.examples[index]


def collate_sequences(examples: Sequence[SequenceExample]) -> StepBatch:
    return collate_steps(
        [example.features for example in examples],
        targets=[example.targets for example in examples],
        loss_masks=[example.loss_mask for example in examples],
    )


def split_examples(
    examples: Sequence[SequenceExample], val_fraction: float, seed: int
) -> Tuple[List[SequenceExample], List[SequenceExample]]:
    """Split by scenario so one scene never lands on both sides"""
    scenario_ids = sorted({example.scenario_id for example in examples})
    if val_fraction <= 0 or len(scenario_ids) < 2:
        return list(examples), []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(scenario_ids))
    n_val = max(1, int(round(val_fraction * len(scenario_ids))))
    held_out = {scenario_ids[i] for i in order[:n_val]}
    train = [example for example in examples if example.scenario_id not in held_out]
    val = [example for example in examples if example.scenario_id in held_out]
    return train, val


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the targets over valid steps"""
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise InvalidArgumentError("logits, targets and mask must share their leading shape")
    if not bool(mask.any()):
        raise InvalidArgumentError("cross entropy needs at least one valid step")
    log_probs = F.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(picked * mask).sum() / mask.sum()


def batch_loss(model: KinematicTokenModel, batch: StepBatch) -> torch.Tensor:
    return cross_entropy(model(batch), batch.targets, batch.loss_mask)


def check_gradients_finite(model: torch.nn.Module) -> None:
    for name, parameter in model.named_parameters():
        if parameter.grad is not None and not torch.isfinite(parameter.grad).all():
            raise NonFiniteGradientError(name)


def compute_gradients(
    model: KinematicTokenModel, batch: StepBatch, loss_scale: float = 1.0
) -> Tuple[float, Dict[str, torch.Tensor]]:
    """Reverse-mode gradients of loss_scale * cross entropy, by parameter name"""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    if not torch.isfinite(loss):
        raise TrainingDivergedError("loss is not finite", {"loss": float(loss)})
    (loss_scale * loss).backward()
    check_gradients_finite(model)
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return float(loss), grads


def gradient_check(
    model: KinematicTokenModel,
    batch: StepBatch,
    samples_per_parameter: int = 4,
    h: float = 1e-4,
    seed: int = 0,
) -> Dict[str, float]:
    """Worst relative error between analytic and central-difference gradients per parameter"""
    model.eval()
    _, grads = compute_gradients(model, batch)
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    with torch.no_grad():
        for name, parameter in model.named_parameters():
            flat = parameter.view(-1)
            count = min(samples_per_parameter, flat.numel())
            picks = rng.choice(flat.numel(), size=count, replace=False)
            errors = []
            for index in picks:
                original = flat[index].item()
                flat[index] = original + h
                plus = float(batch_loss(model, batch))
                flat[index] = original - h
                minus = float(batch_loss(model, batch))
                flat[index] = original
                numeric = (plus - minus) / (2 * h)
                analytic = float(grads[name].view(-1)[index])
                errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
            worst[name] = max(errors)
    return worst


@torch.no_grad()
def evaluate_ce(model: KinematicTokenModel, examples: Sequence[SequenceExample], batch_size: int = 256) -> float:
    """Token-weighted validation cross entropy"""
    if not examples:
        raise EmptyDatasetError("no examples to evaluate")
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(examples), batch_size):
        batch = collate_sequences(examples[start : start + batch_size])
        n = int(batch.loss_mask.sum())
        if n == 0:
            continue
        total += float(batch_loss(model, batch)) * n
        count += n
    model.train(was_training)
    if count == 0:
        raise EmptyDatasetError("validation examples carry no valid steps")
    return total / count


def train(
    model: KinematicTokenModel,
    examples: Sequence[SequenceExample],
    config: TrainConfig,
    val_examples: Optional[Sequence[SequenceExample]] = None,
    on_epoch: Optional[Callable[[Dict[str, float]], None]] = None,
) -> TrainResult:
    """Adam with a one-cycle schedule; bit-reproducible for a fixed seed on one worker"""
    if not examples:
        raise EmptyDatasetError("training set is empty")
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(
        SequenceDataset(examples),
        batch_size=config.batch_size,
        shuffle=True,
        collate_fn=collate_sequences,
        generator=generator,
        num_workers=0 if config.workers <= 1 else config.workers,
    )
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.OneCycleLR(
        optimizer,
        max_lr=config.lr,
        total_steps=config.epochs * len(loader),
        pct_start=config.pct_start,
        anneal_strategy="cos",
        cycle_momentum=False,
    )

    rows: List[Dict[str, float]] = []
    step = 0
    last_good = math.nan
    model.train()
    for epoch in tqdm(range(1, config.epochs + 1), desc="train", disable=not progress_enabled()):
        epoch_total, epoch_count = 0.0, 0
        for batch in loader:
            optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "training loss became non-finite",
                    {"epoch": epoch, "step": step, "lr": scheduler.get_last_lr()[0], "last_loss": last_good},
                )
            loss.backward()
            try:
                check_gradients_finite(model)
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(
                    str(exc), {"epoch": epoch, "step": step, "parameter": exc.parameter}
                ) from exc
            optimizer.step()
            scheduler.step()
            step += 1
            last_good = float(loss)
            n = int(batch.loss_mask.sum())
            epoch_total += last_good * n
            epoch_count += n

        row = {
            "epoch": epoch,
            "step": step,
            "lr": scheduler.get_last_lr()[0],
            "train_ce": epoch_total / max(epoch_count, 1),
            "val_ce": evaluate_ce(model, val_examples, config.batch_size) if val_examples else math.nan,
        }
        rows.append(row)
        logger.info("epoch %d: train CE %.4f, val CE %.4f", epoch, row["train_ce"], row["val_ce"])
        if on_epoch is not None:
            on_epoch(row)

    model.eval()
    curve = pd.DataFrame(rows, columns=["epoch", "step", "lr", "train_ce", "val_ce"])
    final_val = float(curve["val_ce"].iloc[-1]) if val_examples else None
    return TrainResult(
        model=model,
        curve=curve,
        final_train_ce=float(curve["train_ce"].iloc[-1]),
        final_val_ce=final_val,
        metadata={"steps": step, "epochs": config.epochs, "seed": config.seed},
    )


def save_loss_curve(curve: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve.to_csv(path, index=False)
    return path


def save_checkpoint(model: KinematicTokenModel, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT,
            "config": model.config.model_dump(),
            "state_dict": model.state_dict(),
            "metadata": metadata or {},
        },
        path,
    )
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[KinematicTokenModel, Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise KinesimError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise KinesimError(f"unsupported checkpoint format {payload.get('format_version')} in {path}")
    model = KinematicTokenModel(ModelConfig.model_validate(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, dict(payload.get("metadata", {}))


ABLATION_STEPS = [
    ("base", dict(causal_attention=False, unified_spatial_repr=False, u_embedding=False)),
    ("+causal", dict(causal_attention=True, unified_spatial_repr=False, u_embedding=False)),
    ("+usr", dict(causal_attention=True, unified_spatial_repr=True, u_embedding=False)),
    ("+u_embedding", dict(causal_attention=True, unified_spatial_repr=True, u_embedding=True)),
]


def ablation_configs(base: ModelConfig) -> List[Tuple[str, ModelConfig]]:
    return [(name, base.model_copy(update=switches)) for name, switches in ABLATION_STEPS]


def run_ablation(
    scenarios: Dict[str, Scenario],
    records: Sequence[TokenRecord],
    base: ModelConfig,
    config: TrainConfig,
) -> pd.DataFrame:
    """Train the four cumulative configurations on the same split and compare CE"""
    rows = []
    for name, model_config in ablation_configs(base):
        examples = build_examples(scenarios, records, model_config)
        train_set, val_set = split_examples(examples, config.val_fraction, config.seed)
        model = build_model(model_config, seed=config.seed)
        result = train(model, train_set, config, val_set or None)
        rows.append(
            {
                "config": name,
                "causal_attention": model_config.causal_attention,
                "unified_spatial_repr": model_config.unified_spatial_repr,
                "u_embedding": model_config.u_embedding,
                "train_ce": result.final_train_ce,
                "val_ce": result.final_val_ce if result.final_val_ce is not None else math.nan,
            }
        )
        logger.info("ablation %s: train CE %.4f", name, result.final_train_ce)
    return pd.DataFrame(rows)

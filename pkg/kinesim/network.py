"""
Autoregressive kinematic-token network.

Per step, every scene element (agent box edges, map segments, light stop
points) plus the target's own feature row is embedded, fused by set
self-attention and pooled into one d_model token. The previous action token
is added to that step token (U-embedding). A causal transformer over the step
tokens then predicts a distribution over the 3969 codebook actions for the
next transition.

Everything runs in float64.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from kinesim.core.action_codec import VOCAB_SIZE
from kinesim.core.errors import InvalidArgumentError
from kinesim.scene import SceneStepInput
from kinesim.schemas import AgentKind, LightState, PolylineKind

logger = logging.getLogger(__name__)

DTYPE = torch.float64
FEATURE_DIM = 6
SIZE_SCALE = 5.0

# element roles
ROLE_AGENT_EDGE = 0
ROLE_MAP_SEGMENT = 1
ROLE_LIGHT = 2
ROLE_AGENT_POSE = 3
NUM_ROLES = 4

# one attribute table shared by agents, polylines and lights, offset per role
AGENT_ATTR_OFFSET = 0
POLYLINE_ATTR_OFFSET = AGENT_ATTR_OFFSET + len(AgentKind)
LIGHT_ATTR_OFFSET = POLYLINE_ATTR_OFFSET + len(PolylineKind)
NUM_ATTRIBUTES = LIGHT_ATTR_OFFSET + len(LightState)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_model: int = Field(default=64, ge=1)
    n_heads: int = Field(default=4, ge=1)
    enc_layers: int = Field(default=3, ge=0)
    dec_layers: int = Field(default=3, ge=0)
    vocab: int = VOCAB_SIZE
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    ff_mult: int = Field(default=4, ge=1)
    causal_attention: bool = True
    unified_spatial_repr: bool = True
    u_embedding: bool = True
    coord_scale: float = Field(default=50.0, gt=0)
    speed_scale: float = Field(default=10.0, gt=0)
    max_steps: int = Field(default=64, ge=1)
    zero_head_init: bool = True

    @model_validator(mode="after")
    def _shapes(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.vocab != VOCAB_SIZE:
            raise ValueError(f"vocab must equal the codebook size {VOCAB_SIZE}")
        return self


@dataclass
class StepFeatures:
    """Numeric rows of one SceneStepInput, ready for batching"""

    rows: np.ndarray  # (E, 6)
    roles: np.ndarray  # (E,)
    attributes: np.ndarray  # (E,)
    target: np.ndarray  # (3,)
    target_kind: int
    prev_token: int


@dataclass
class StepBatch:
    """Padded tensors for B sequences of T steps with up to E elements each"""

    rows: torch.Tensor  # (B, T, E, 6)
    roles: torch.Tensor  # (B, T, E)
    attributes: torch.Tensor  # (B, T, E)
    element_mask: torch.Tensor  # (B, T, E)
    target: torch.Tensor  # (B, T, 3)
    target_kind: torch.Tensor  # (B, T)
    prev_tokens: torch.Tensor  # (B, T)
    step_mask: torch.Tensor  # (B, T)
    targets: Optional[torch.Tensor] = None  # (B, T) next-action tokens
    loss_mask: Optional[torch.Tensor] = None  # (B, T)

    @property
    def shape(self) -> tuple:
        return tuple(self.target_kind.shape)


def featurize_step(step: SceneStepInput, config: ModelConfig) -> StepFeatures:
    scale = config.coord_scale
    rows: List[np.ndarray] = []
    roles: List[np.ndarray] = []
    attributes: List[np.ndarray] = []

    n_neighbors = len(step.neighbor_ids)
    if n_neighbors:
        velocity = step.neighbor_velocities / config.speed_scale
        if config.unified_spatial_repr:
            edges = step.neighbor_vectors.reshape(n_neighbors * 4, 4) / scale
            rows.append(np.concatenate([edges, np.repeat(velocity, 4, axis=0)], axis=1))
            roles.append(np.full(n_neighbors * 4, ROLE_AGENT_EDGE))
            attributes.append(np.repeat(step.neighbor_kinds, 4) + AGENT_ATTR_OFFSET)
        else:
            pose = step.neighbor_poses.copy()
            pose[:, :2] /= scale
            rows.append(np.concatenate([pose, velocity], axis=1))
            roles.append(np.full(n_neighbors, ROLE_AGENT_POSE))
            attributes.append(step.neighbor_kinds + AGENT_ATTR_OFFSET)

    if len(step.map_vectors):
        segments = step.map_vectors / scale
        rows.append(np.concatenate([segments, np.zeros((len(segments), 2))], axis=1))
        roles.append(np.full(len(segments), ROLE_MAP_SEGMENT))
        attributes.append(step.map_kinds + POLYLINE_ATTR_OFFSET)

    if len(step.light_points):
        points = step.light_points / scale
        rows.append(np.concatenate([points, points, np.zeros((len(points), 2))], axis=1))
        roles.append(np.full(len(points), ROLE_LIGHT))
        attributes.append(step.light_states + LIGHT_ATTR_OFFSET)

    length, width = step.target_size
    return StepFeatures(
        rows=np.concatenate(rows).astype(np.float64) if rows else np.zeros((0, FEATURE_DIM)),
        roles=np.concatenate(roles).astype(np.int64) if roles else np.zeros(0, dtype=np.int64),
        attributes=np.concatenate(attributes).astype(np.int64) if attributes else np.zeros(0, dtype=np.int64),
        target=np.array([step.target_speed / config.speed_scale, length / SIZE_SCALE, width / SIZE_SCALE]),
        target_kind=int(step.target_kind),
        prev_token=int(step.prev_token),
    )


def collate_steps(
    sequences: Sequence[Sequence[StepFeatures]],
    targets: Optional[Sequence[Sequence[int]]] = None,
    loss_masks: Optional[Sequence[Sequence[bool]]] = None,
) -> StepBatch:
    """Pad a list of step-feature sequences into one StepBatch"""
    if not sequences or any(len(seq) == 0 for seq in sequences):
        raise InvalidArgumentError("every sequence needs at least one step")
    batch = len(sequences)
    steps = max(len(seq) for seq in sequences)
    elements = max((len(f.rows) for seq in sequences for f in seq), default=0)

    rows = np.zeros((batch, steps, elements, FEATURE_DIM))
    roles = np.zeros((batch, steps, elements), dtype=np.int64)
    attributes = np.zeros((batch, steps, elements), dtype=np.int64)
    element_mask = np.zeros((batch, steps, elements), dtype=bool)
    target = np.zeros((batch, steps, 3))
    target_kind = np.zeros((batch, steps), dtype=np.int64)
    prev_tokens = np.zeros((batch, steps), dtype=np.int64)
    step_mask = np.zeros((batch, steps), dtype=bool)
    for b, seq in enumerate(sequences):
        for t, features in enumerate(seq):
            n = len(features.rows)
            rows[b, t, :n] = features.rows
            roles[b, t, :n] = features.roles
            attributes[b, t, :n] = features.attributes
            element_mask[b, t, :n] = True
            target[b, t] = features.target
            target_kind[b, t] = features.target_kind
            prev_tokens[b, t] = features.prev_token
            step_mask[b, t] = True

    out = StepBatch(
        rows=torch.from_numpy(rows),
        roles=torch.from_numpy(roles),
        attributes=torch.from_numpy(attributes),
        element_mask=torch.from_numpy(element_mask),
        target=torch.from_numpy(target),
        target_kind=torch.from_numpy(target_kind),
        prev_tokens=torch.from_numpy(prev_tokens),
        step_mask=torch.from_numpy(step_mask),
    )
    if targets is not None:
        padded = np.zeros((batch, steps), dtype=np.int64)
        mask = np.zeros((batch, steps), dtype=bool)
        for b, seq in enumerate(targets):
            padded[b, : len(seq)] = seq
            if loss_masks is None:
                mask[b, : len(seq)] = True
            else:
                mask[b, : len(seq)] = loss_masks[b]
        out.targets = torch.from_numpy(padded)
        out.loss_mask = torch.from_numpy(mask & step_mask)
    return out


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        """allowed broadcasts to (B, heads, Lq, Lk); False entries get zero weight"""
        q = self._split(self.query(queries))
        k = self._split(self.key(keys))
        v = self._split(self.value(keys))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allowed, float("-inf"))
        weights = self.dropout(F.softmax(scores, dim=-1))
        context = (weights @ v).transpose(1, 2).reshape(queries.shape[0], queries.shape[1], -1)
        return self.out(context)


class Block(nn.Module):
    """Pre-norm self-attention block"""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ff_norm = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Linear(ff_mult * d_model, d_model),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        h = self.attn_norm(x)
        x = x + self.dropout(self.attn(h, h, allowed))
        return x + self.dropout(self.ff(self.ff_norm(x)))


class AttentionPool(nn.Module):
    """Pools a masked element set into one vector with a learned query"""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.query = nn.Parameter(torch.randn(1, 1, d_model) * 0.02)
        self.norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        query = self.query.expand(x.shape[0], 1, -1)
        pooled = self.attn(query, self.norm(x), mask[:, None, None, :])
        return pooled.squeeze(1)


def _mlp(in_dim: int, d_model: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, d_model), nn.GELU(), nn.Linear(d_model, d_model))


class KinematicTokenModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.vector_mlp = _mlp(FEATURE_DIM, d)
        self.agent_mlp = _mlp(FEATURE_DIM, d)
        self.role_embedding = nn.Embedding(NUM_ROLES, d)
        self.attribute_embedding = nn.Embedding(NUM_ATTRIBUTES, d)
        self.target_mlp = _mlp(3, d)
        self.target_kind_embedding = nn.Embedding(len(AgentKind), d)
        self.encoder = nn.ModuleList(Block(d, config.n_heads, config.ff_mult, config.dropout) for _ in range(config.enc_layers))
        self.pool = AttentionPool(d, config.n_heads)
        # last row is the start token (no previous action)
        self.u_embedding = nn.Embedding(config.vocab + 1, d)
        self.position_embedding = nn.Embedding(config.max_steps, d)
        self.decoder = nn.ModuleList(Block(d, config.n_heads, config.ff_mult, config.dropout) for _ in range(config.dec_layers))
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab)
        if config.zero_head_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        self.to(DTYPE)

    def encode_steps(self, batch: StepBatch) -> torch.Tensor:
        """(B, T, d_model) step tokens; steps are encoded independently"""
        b, t = batch.shape
        e = batch.rows.shape[2]
        rows = batch.rows.reshape(b * t, e, FEATURE_DIM)
        roles = batch.roles.reshape(b * t, e)
        is_pose = (roles == ROLE_AGENT_POSE).unsqueeze(-1)
        elements = torch.where(is_pose, self.agent_mlp(rows), self.vector_mlp(rows))
        elements = elements + self.role_embedding(roles) + self.attribute_embedding(batch.attributes.reshape(b * t, e))

        target = self.target_mlp(batch.target.reshape(b * t, 1, 3))
        target = target + self.target_kind_embedding(batch.target_kind.reshape(b * t, 1))

        tokens = torch.cat([target, elements], dim=1)
        mask = torch.cat(
            [torch.ones(b * t, 1, dtype=torch.bool), batch.element_mask.reshape(b * t, e)], dim=1
        )
        allowed = mask[:, None, None, :]
        for block in self.encoder:
            tokens = block(tokens, allowed)
        pooled = self.pool(tokens, mask)
        if self.config.u_embedding:
            pooled = pooled + self.u_embedding(batch.prev_tokens.reshape(b * t))
        return pooled.view(b, t, -1)

    def forward(self, batch: StepBatch) -> torch.Tensor:
        """(B, T, vocab) logits of the action taken after each step"""
        b, t = batch.shape
        if t > self.config.max_steps:
            raise InvalidArgumentError(f"sequence of {t} steps exceeds max_steps={self.config.max_steps}")
        h = self.encode_steps(batch) + self.position_embedding(torch.arange(t))
        allowed = batch.step_mask[:, None, None, :]
        if self.config.causal_attention:
            allowed = allowed & torch.tril(torch.ones(t, t, dtype=torch.bool))
        allowed = allowed | torch.eye(t, dtype=torch.bool)
        for block in self.decoder:
            h = block(h, allowed)
        return self.head(self.final_norm(h))

    def encode_step(self, step: SceneStepInput) -> torch.Tensor:
        return self.encode_steps(collate_steps([[featurize_step(step, self.config)]]))[0, 0]


def build_model(config: ModelConfig, seed: Optional[int] = None) -> KinematicTokenModel:
    if seed is not None:
        torch.manual_seed(seed)
    return KinematicTokenModel(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

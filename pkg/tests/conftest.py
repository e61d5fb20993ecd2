from typing import Dict, List, Optional, Sequence

import pytest

from kinesim import database
from kinesim.core.action_codec import ZERO_TOKEN_FLAT, dequantize_flat
from kinesim.core.kinematics import AgentState, ctra_rollout
from kinesim.network import ModelConfig, build_model
from kinesim.schemas import AgentMeta, MapPolyline, PolylineKind, Scenario, Track
from kinesim.synthetic import GeneratorConfig, generate_synthetic


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(d_model=16, n_heads=2, enc_layers=1, dec_layers=1, max_steps=32)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def make_scenario():
    """Factory for hand-built scenarios whose agents replay constant-token tracks.

    Each agent is a dict with id, x, y, theta, v and optionally token, length,
    width and valid (a per-step flag list).
    """

    def factory(
        agents: Sequence[Dict],
        history_len: int = 2,
        future_len: int = 6,
        dt: float = 0.5,
        scenario_id: str = "hand-00000",
        lane: bool = True,
    ) -> Scenario:
        steps = history_len + 1 + future_len
        tracks: List[Track] = []
        for spec in agents:
            token = spec.get("token", ZERO_TOKEN_FLAT)
            start = AgentState(x=spec["x"], y=spec["y"], theta=spec.get("theta", 0.0), v=spec.get("v", 0.0))
            states = [start] + ctra_rollout(start, [dequantize_flat(token)] * (steps - 1), dt)
            meta = AgentMeta(id=spec["id"], length=spec.get("length", 4.5), width=spec.get("width", 2.0))
            valid: Optional[List[bool]] = spec.get("valid")
            tracks.append(
                Track(
                    meta=meta,
                    states=states,
                    valid=list(valid) if valid is not None else [True] * steps,
                    gt_tokens=[token] * (steps - 1),
                )
            )
        polylines = []
        if lane:
            polylines.append(MapPolyline(id=0, kind=PolylineKind.LANE_CENTER, points=[(-20.0, 0.0), (120.0, 0.0)]))
        return Scenario(
            scenario_id=scenario_id,
            dt=dt,
            history_len=history_len,
            future_len=future_len,
            polylines=polylines,
            tracks=tracks,
        )

    return factory


@pytest.fixture(scope="session")
def synthetic_scenes() -> List[Scenario]:
    config = GeneratorConfig(straight_follow=1, car_following=1, crossing_conflict=1, future_len=6)
    return generate_synthetic(config, seed=3)


@pytest.fixture
def registry():
    """Run registry on a private in-memory database"""
    database.configure_engine("sqlite://")
    database.init_db()
    yield database
    database.Base.metadata.drop_all(bind=database.engine)

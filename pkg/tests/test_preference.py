import copy
import math

import numpy as np
import pytest
import torch

from kinesim.core.action_codec import VOCAB_SIZE, ZERO_TOKEN_FLAT, ActionToken
from kinesim.core.errors import EmptyDatasetError, InvalidArgumentError, MissingReplayStateError
from kinesim.core.kinematics import AgentState
from kinesim.network import build_model, collate_steps, featurize_step
from kinesim.preference import (
    DPOConfig,
    DriverProfile,
    PreferencePair,
    build_pairs,
    conditioning_features,
    dpo_finetune,
    dpo_loss,
    load_pairs,
    pairs_dpo_loss,
    prepare_pairs,
    preference_margin,
    save_pairs,
    seq_logprob,
)
from kinesim.rollout import RolloutConfig, SimulatedScenario, closed_loop

LN2 = math.log(2.0)


def at(x, v):
    return AgentState(x=x, y=0.0, theta=0.0, v=v)


def flats(*ia):
    return [ActionToken.from_indices(i, 31).flat for i in ia]


@pytest.fixture
def base(make_scenario):
    return make_scenario([{"id": 0, "x": 0.0, "y": 0.0, "v": 5.0}, {"id": 1, "x": 100.0, "y": 0.0}], history_len=0, future_len=4)


@pytest.fixture
def rollouts(base):
    """Four rollouts of ego 0: fast but jerky, slow and smooth, crash at step 2, crash at step 1"""
    parked = [at(100.0, 0.0)] * 5

    def sim(ego_states, tokens):
        return SimulatedScenario(
            base=base, start_index=0, horizon=4, controlled=[0], trajectories={0: ego_states, 1: parked}, tokens={0: tokens}
        )

    return [
        sim([at(6.0 * j, 6.0) for j in range(5)], flats(31, 40, 22, 31)),
        sim([at(4.0 * j, 4.0) for j in range(5)], [ZERO_TOKEN_FLAT] * 4),
        sim([at(0.0, 5.0), at(50.0, 5.0)] + [at(100.0, 5.0)] * 3, flats(33, 33, 33, 33)),
        sim([at(0.0, 5.0)] + [at(100.0, 5.0)] * 4, flats(35, 35, 35, 35)),
    ]


@pytest.fixture
def scene(make_scenario):
    return make_scenario(
        [{"id": 0, "x": 0.0, "y": 0.0, "v": 5.0}, {"id": 1, "x": 30.0, "y": 3.5, "v": 4.0}], history_len=2, future_len=6
    )


@pytest.fixture
def random_model(tiny_config):
    return build_model(tiny_config.model_copy(update={"zero_head_init": False}), seed=8)


def test_dpo_loss_at_the_reference_is_ln2():
    logp = torch.tensor([-3.0, -7.5], dtype=torch.float64)
    other = torch.tensor([-4.0, -1.0], dtype=torch.float64)
    assert float(dpo_loss(logp, other, logp, other)) == pytest.approx(LN2, abs=1e-9)


def test_dpo_loss_rewards_a_positive_margin():
    zero = torch.zeros(1, dtype=torch.float64)
    better = dpo_loss(torch.tensor([1.0], dtype=torch.float64), zero, zero, zero, beta=0.5)
    worse = dpo_loss(torch.tensor([-1.0], dtype=torch.float64), zero, zero, zero, beta=0.5)
    assert 0 < float(better) < LN2 < float(worse)
    assert float(better) == pytest.approx(-math.log(1 / (1 + math.exp(-0.5))))


def test_dpo_loss_needs_positive_beta():
    zero = torch.zeros(1, dtype=torch.float64)
    with pytest.raises(InvalidArgumentError):
        dpo_loss(zero, zero, zero, zero, beta=0.0)


def test_dpo_gradient_at_the_reference_is_half_the_logprob_gap(scene, random_model):
    beta = 0.7
    pair = PreferencePair(scenario=scene, agent_id=0, start_index=2, profile="safety", winner=flats(31, 40, 22), loser=flats(10, 10, 50))
    reference = random_model.eval()
    policy = copy.deepcopy(reference)
    pairs_dpo_loss(policy, reference, prepare_pairs(policy.config, [pair]), beta).backward()
    dpo_grads = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in policy.parameters()]

    gap_model = copy.deepcopy(reference)
    gap = seq_logprob(gap_model, scene, 0, pair.winner) - seq_logprob(gap_model, scene, 0, pair.loser)
    gap.backward()
    for got, param in zip(dpo_grads, gap_model.parameters()):
        expected = -0.5 * beta * (param.grad if param.grad is not None else torch.zeros_like(param))
        assert torch.allclose(got, expected, atol=1e-12, rtol=1e-9)
    assert any(float(grad.abs().max()) > 0 for grad in dpo_grads)


def test_sequence_logprob_drops_with_every_appended_step(scene, random_model):
    rng = np.random.default_rng(6)
    tokens = rng.integers(0, VOCAB_SIZE, size=6).tolist()
    with torch.no_grad():
        values = [float(seq_logprob(random_model, scene, 0, tokens[:k])) for k in range(len(tokens) + 1)]
    assert values[0] == 0.0
    assert all(later < earlier for earlier, later in zip(values, values[1:]))


def test_safety_prefers_the_first_safe_rollout(rollouts):
    (pair,) = build_pairs(rollouts, DriverProfile.SAFETY)
    assert pair.winner == rollouts[0].tokens[0]
    # earliest collision loses
    assert pair.loser == rollouts[3].tokens[0]
    assert pair.agent_id == 0 and pair.start_index == 0


def test_fast_prefers_the_highest_mean_speed(rollouts):
    (pair,) = build_pairs(list(reversed(rollouts)), "fast")
    assert pair.winner == rollouts[0].tokens[0]
    assert pair.profile is DriverProfile.FAST


def test_comfort_prefers_the_smoothest(rollouts):
    (pair,) = build_pairs(rollouts, DriverProfile.COMFORT)
    assert pair.winner == [ZERO_TOKEN_FLAT] * 4


def test_no_pair_without_both_outcomes(rollouts):
    assert build_pairs(rollouts[:2], DriverProfile.SAFETY) == []
    assert build_pairs(rollouts[2:], DriverProfile.SAFETY) == []
    assert build_pairs([], DriverProfile.SAFETY) == []


def test_no_pair_when_sequences_match(rollouts):
    twin = rollouts[3].model_copy(update={"tokens": {0: rollouts[0].tokens[0]}})
    assert build_pairs([rollouts[0], twin], DriverProfile.SAFETY) == []


def test_pair_sequences_must_differ(base):
    with pytest.raises(ValueError):
        PreferencePair(scenario=base, agent_id=0, start_index=0, profile="safety", winner=[1, 2], loser=[1, 2])


def test_uniform_model_sequence_logprob(make_scenario, tiny_model):
    scene = make_scenario([{"id": 0, "x": 0.0, "y": 0.0, "v": 5.0}], history_len=2, future_len=16)
    logp = seq_logprob(tiny_model, scene, 0, [ZERO_TOKEN_FLAT] * 16)
    assert float(logp) == pytest.approx(-16 * math.log(VOCAB_SIZE), abs=1e-9)
    assert float(logp) == pytest.approx(-132.58, abs=1e-2)


def test_conditioning_matches_what_the_rollout_saw(scene, random_model):
    seen = []
    config = RolloutConfig(horizon=5, sampler="temperature:1.0", seed=4)
    sim = closed_loop(scene, random_model, config, on_step_inputs=lambda t, inputs: seen.append(inputs[0]))
    features, offset = conditioning_features(random_model.config, scene, 0, sim.tokens[0], window=config.window)
    assert len(features) == offset + 5
    for step_input, replayed in zip(seen, features[offset:]):
        rollout_features = featurize_step(step_input, random_model.config)
        assert np.array_equal(rollout_features.rows, replayed.rows)
        assert np.array_equal(rollout_features.target, replayed.target)
        assert rollout_features.prev_token == replayed.prev_token


def test_argmax_rollout_is_the_argmax_of_its_conditioning(scene, random_model):
    sim = closed_loop(scene, random_model, RolloutConfig(horizon=5))
    features, offset = conditioning_features(random_model.config, scene, 0, sim.tokens[0])
    with torch.no_grad():
        logits = random_model(collate_steps([features]))[0]
    assert logits[offset:].argmax(dim=-1).tolist() == sim.tokens[0]
    best = torch.log_softmax(logits[offset:], dim=-1).max(dim=-1).values.sum()
    assert float(seq_logprob(random_model, scene, 0, sim.tokens[0])) == pytest.approx(float(best), abs=1e-9)


def test_tokens_past_the_log_are_rejected(scene, random_model):
    with pytest.raises(MissingReplayStateError):
        conditioning_features(random_model.config, scene, 0, [ZERO_TOKEN_FLAT] * 7)


def test_finetune_moves_toward_the_winner(scene, random_model):
    pairs = [
        PreferencePair(scenario=scene, agent_id=0, start_index=2, profile="safety", winner=flats(31, 31, 31), loser=flats(10, 10, 10)),
        PreferencePair(scenario=scene, agent_id=0, start_index=2, profile="safety", winner=flats(33, 33), loser=flats(5, 50)),
    ]
    before = [p.detach().clone() for p in random_model.parameters()]
    policy, history = dpo_finetune(random_model, pairs, DPOConfig(lr=1e-2, steps=15, batch_size=2))
    assert history["loss"].iloc[0] == pytest.approx(LN2, abs=1e-9)
    assert history["loss"].iloc[-1] < LN2
    assert preference_margin(policy, random_model, prepare_pairs(policy.config, pairs)) > 0
    for old, new in zip(before, random_model.parameters()):
        assert torch.equal(old, new)
        assert new.requires_grad


def test_finetune_needs_pairs(random_model):
    with pytest.raises(EmptyDatasetError):
        dpo_finetune(random_model, [], DPOConfig())


def test_pair_file_round_trip(scene, tmp_path):
    pair = PreferencePair(scenario=scene, agent_id=0, start_index=2, profile="comfort", winner=[1, 2], loser=[3, 4])
    path = tmp_path / "pairs.jsonl"
    assert save_pairs([pair], path) == 1
    (loaded,) = load_pairs(path, {scene.scenario_id: scene})
    assert loaded.winner == [1, 2] and loaded.profile is DriverProfile.COMFORT
    assert load_pairs(path, {}) == []

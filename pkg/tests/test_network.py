import dataclasses
import math

import pytest
import torch

from kinesim.core.action_codec import START_TOKEN, VOCAB_SIZE
from kinesim.core.errors import InvalidArgumentError
from kinesim.network import ModelConfig, build_model, collate_steps, count_parameters
from kinesim.scene import build_step_input
from kinesim.tokenizer import tokenize_all
from kinesim.training import build_examples, collate_sequences, cross_entropy, gradient_check


@pytest.fixture
def examples(make_scenario, tiny_config):
    scenario = make_scenario(
        [
            {"id": 1, "x": 0.0, "y": 0.0, "v": 6.0, "token": 33 * 63 + 35},
            {"id": 2, "x": 15.0, "y": 0.5, "v": 4.0},
        ],
        future_len=4,
    )
    records = tokenize_all([scenario])
    return build_examples({scenario.scenario_id: scenario}, records, tiny_config)


def test_zero_head_predicts_uniform(tiny_model, examples):
    batch = collate_sequences(examples)
    logits = tiny_model(batch)
    assert logits.shape == (2, 6, VOCAB_SIZE)
    probs = torch.softmax(logits, dim=-1)
    assert torch.allclose(probs.sum(-1), torch.ones(2, 6, dtype=torch.float64), atol=1e-6)
    ce = cross_entropy(logits, batch.targets, batch.loss_mask)
    assert float(ce) == pytest.approx(math.log(VOCAB_SIZE), abs=1e-5)
    assert float(ce) == pytest.approx(8.28627, abs=1e-5)


def test_later_steps_do_not_leak_into_earlier_logits(tiny_config, examples):
    model = build_model(tiny_config.model_copy(update={"zero_head_init": False}), seed=1).eval()
    features = examples[0].features
    base = collate_steps([features])
    changed = collate_steps([features])
    changed.prev_tokens[0, -1] = 5
    changed.target[0, -1] = changed.target[0, -1] + 3.0
    changed.rows[0, -1] = changed.rows[0, -1] * 2.0
    with torch.no_grad():
        before = model(base)
        after = model(changed)
    assert torch.equal(before[0, :-1], after[0, :-1])
    assert not torch.equal(before[0, -1], after[0, -1])


def test_non_causal_variant_sees_the_future(tiny_config, examples):
    config = tiny_config.model_copy(update={"zero_head_init": False, "causal_attention": False})
    model = build_model(config, seed=1).eval()
    base = collate_steps([examples[0].features])
    changed = collate_steps([examples[0].features])
    changed.prev_tokens[0, -1] = 5
    with torch.no_grad():
        assert not torch.equal(model(base)[0, 0], model(changed)[0, 0])


def test_gradients_match_finite_differences(tiny_config, examples):
    config = tiny_config.model_copy(update={"zero_head_init": False})
    model = build_model(config, seed=2)
    errors = gradient_check(model, collate_sequences(examples), samples_per_parameter=3, h=1e-5)
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-4, worst


@pytest.mark.parametrize(
    "update",
    [{"unified_spatial_repr": False}, {"u_embedding": False}],
)
def test_ablation_variants_run(tiny_config, examples, update):
    model = build_model(tiny_config.model_copy(update=update), seed=0)
    logits = model(collate_sequences(examples))
    assert torch.isfinite(logits).all()


def test_same_seed_same_weights(tiny_config):
    first = build_model(tiny_config, seed=4)
    second = build_model(tiny_config, seed=4)
    for a, b in zip(first.parameters(), second.parameters()):
        assert torch.equal(a, b)
    assert count_parameters(first) > 0


def test_too_long_sequence_is_rejected(tiny_config, examples):
    model = build_model(tiny_config.model_copy(update={"max_steps": 3}), seed=0)
    with pytest.raises(InvalidArgumentError):
        model(collate_sequences(examples))


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)


@pytest.fixture
def crowded_step(make_scenario):
    scenario = make_scenario(
        [
            {"id": 1, "x": 0.0, "y": 0.0, "v": 6.0},
            {"id": 2, "x": 12.0, "y": 3.5, "theta": 0.1, "v": 4.0},
            {"id": 3, "x": -9.0, "y": -3.5, "theta": -0.2, "v": 7.0},
            {"id": 4, "x": 25.0, "y": 0.5, "theta": 3.0, "v": 2.0, "length": 6.0},
        ]
    )
    return build_step_input(scenario, 1, scenario.current_index, prev_token=1000)


def reversed_elements(step):
    return dataclasses.replace(
        step,
        neighbor_ids=step.neighbor_ids[::-1].copy(),
        neighbor_kinds=step.neighbor_kinds[::-1].copy(),
        neighbor_vectors=step.neighbor_vectors[::-1].copy(),
        neighbor_velocities=step.neighbor_velocities[::-1].copy(),
        neighbor_poses=step.neighbor_poses[::-1].copy(),
        map_vectors=step.map_vectors[::-1].copy(),
        map_kinds=step.map_kinds[::-1].copy(),
    )


@pytest.mark.parametrize("unified", [True, False])
def test_step_encoding_ignores_element_order(tiny_config, crowded_step, unified):
    config = tiny_config.model_copy(update={"unified_spatial_repr": unified})
    model = build_model(config, seed=3).eval()
    shuffled = reversed_elements(crowded_step)
    assert len(crowded_step.neighbor_ids) == 3 and len(crowded_step.map_vectors) > 1
    assert list(shuffled.neighbor_ids) != list(crowded_step.neighbor_ids)
    with torch.no_grad():
        assert torch.allclose(model.encode_step(crowded_step), model.encode_step(shuffled), atol=1e-10, rtol=0.0)


def test_without_u_embedding_previous_token_is_ignored(tiny_config, crowded_step):
    model = build_model(tiny_config.model_copy(update={"u_embedding": False}), seed=3).eval()
    with torch.no_grad():
        base = model.encode_step(crowded_step)
        for prev in (0, 1984, START_TOKEN):
            assert torch.equal(model.encode_step(dataclasses.replace(crowded_step, prev_token=prev)), base)


def test_step_encoding_responds_to_its_inputs(tiny_config, crowded_step):
    model = build_model(tiny_config, seed=3).eval()
    moved = crowded_step.neighbor_vectors.copy()
    moved[0] += 1.0
    variants = {
        "prev_token": dataclasses.replace(crowded_step, prev_token=START_TOKEN),
        "neighbor": dataclasses.replace(crowded_step, neighbor_vectors=moved),
        "speed": dataclasses.replace(crowded_step, target_speed=crowded_step.target_speed + 1.0),
        "map": dataclasses.replace(crowded_step, map_vectors=crowded_step.map_vectors[:1], map_kinds=crowded_step.map_kinds[:1]),
    }
    with torch.no_grad():
        base = model.encode_step(crowded_step)
        assert base.shape == (tiny_config.d_model,) and torch.isfinite(base).all()
        for name, variant in variants.items():
            change = float((model.encode_step(variant) - base).abs().max())
            assert change > 1e-8, name

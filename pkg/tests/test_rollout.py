import numpy as np
import pytest

from kinesim.core.errors import InvalidArgumentError, MissingReplayStateError, ScenarioParseError
from kinesim.network import build_model
from kinesim.rollout import (
    RolloutConfig,
    batch_rollouts,
    closed_loop,
    default_controlled,
    load_simulation,
    load_simulations_dir,
    save_simulation,
    simulation_stem,
)


@pytest.fixture
def scene(make_scenario):
    return make_scenario(
        [
            {"id": 3, "x": 0.0, "y": 0.0, "v": 6.0},
            {"id": 5, "x": 25.0, "y": 0.0, "v": 4.0},
            {"id": 8, "x": -20.0, "y": 3.5, "v": 8.0, "valid": [False] * 4 + [True] * 5},
        ],
        history_len=2,
        future_len=6,
    )


@pytest.fixture
def random_model(tiny_config):
    return build_model(tiny_config.model_copy(update={"zero_head_init": False}), seed=5)


def test_default_ego_is_lowest_present_id(scene):
    assert default_controlled(scene) == [3]


def test_argmax_of_uniform_model_picks_lowest_token(scene, tiny_model):
    sim = closed_loop(scene, tiny_model, RolloutConfig(horizon=4))
    assert sim.tokens == {3: [0, 0, 0, 0]}
    assert sim.is_feasible()


def test_replayed_agents_follow_the_log(scene, random_model):
    sim = closed_loop(scene, random_model, RolloutConfig(horizon=6, sampler="top_p:0.9", seed=1))
    track = scene.track(5)
    assert sim.trajectories[5] == track.states[2:]
    # agent 8 enters the log at step 4
    assert sim.trajectories[8][:2] == [None, None]
    assert sim.trajectories[8][2] == scene.track(8).states[4]
    assert len(sim.trajectories[3]) == 7
    assert sim.is_feasible()


def test_rollouts_are_reproducible_per_sample(scene, random_model):
    config = RolloutConfig(horizon=5, sampler="temperature:1.0", seed=11, samples=3)
    first = batch_rollouts(scene, random_model, config)
    second = batch_rollouts(scene, random_model, config)
    assert [s.tokens for s in first] == [s.tokens for s in second]
    assert [s.sample_index for s in first] == [0, 1, 2]
    assert first[0].tokens != first[1].tokens


def test_top_p_batch_rollouts_are_all_feasible(scene, random_model):
    config = RolloutConfig(horizon=6, sampler="top_p:0.8", seed=21, samples=6, controlled=[3, 5])
    sims = batch_rollouts(scene, random_model, config)
    assert len(sims) == 6
    for sim in sims:
        assert sim.is_feasible()
        assert sorted(sim.tokens) == [3, 5] and all(len(tokens) == 6 for tokens in sim.tokens.values())
        assert np.isfinite(sim.positions(3)).all() and np.isfinite(sim.positions(5)).all()
        assert sim.trajectories[8][2] == scene.track(8).states[4]
    assert len({tuple(sim.tokens[3]) for sim in sims}) > 1


def test_several_controlled_agents_share_one_step(scene, random_model):
    sim = closed_loop(scene, random_model, RolloutConfig(horizon=3, controlled=[3, 5]))
    assert sorted(sim.tokens) == [3, 5]
    assert all(len(tokens) == 3 for tokens in sim.tokens.values())
    assert sim.is_feasible()


def test_background_agents_use_their_own_model(scene, random_model, tiny_model):
    config = RolloutConfig(horizon=3, controlled=[3], background=[5])
    sim = closed_loop(scene, random_model, config, background_model=tiny_model)
    assert sim.tokens[5] == [0, 0, 0]
    assert sim.background == [5]
    with pytest.raises(InvalidArgumentError):
        closed_loop(scene, random_model, config)


def test_zero_horizon_returns_the_current_state(scene, random_model):
    sim = closed_loop(scene, random_model, RolloutConfig(horizon=0))
    assert sim.tokens == {3: []}
    assert sim.trajectories[3] == [scene.track(3).states[2]]
    assert sim.positions(3).shape == (1, 2)


def test_horizon_past_the_log_needs_replay_states(scene, random_model):
    with pytest.raises(MissingReplayStateError):
        closed_loop(scene, random_model, RolloutConfig(horizon=7))


def test_controlled_agent_must_be_present(scene, random_model):
    with pytest.raises(InvalidArgumentError):
        closed_loop(scene, random_model, RolloutConfig(horizon=2, controlled=[8]))


def test_agent_sets_must_be_disjoint():
    with pytest.raises(ValueError):
        RolloutConfig(controlled=[1], replayed=[1, 2])


def test_step_inputs_hook_sees_every_step(scene, random_model):
    seen = []
    closed_loop(scene, random_model, RolloutConfig(horizon=4), on_step_inputs=lambda t, inputs: seen.append((t, sorted(inputs))))
    assert seen == [(2, [3]), (3, [3]), (4, [3]), (5, [3])]


def test_simulation_files_round_trip(scene, random_model, tmp_path):
    sims = batch_rollouts(scene, random_model, RolloutConfig(horizon=4, sampler="top_p:0.95", samples=2, seed=3))
    for sim in sims:
        scenario_file, sidecar = save_simulation(sim, tmp_path)
        assert scenario_file.name == f"{simulation_stem(sim)}.scn.jsonl"
        assert sidecar.exists()
    loaded = load_simulations_dir(tmp_path)
    assert [s.sample_index for s in loaded] == [0, 1]
    for original, copy in zip(sims, loaded):
        assert copy.scenario_id == original.scenario_id
        assert copy.tokens == original.tokens
        assert copy.trajectories[3] == original.trajectories[3]
        assert copy.is_feasible()
        assert np.allclose(copy.positions(5), original.positions(5))


def test_simulated_scenario_is_a_scenario(scene, random_model):
    sim = closed_loop(scene, random_model, RolloutConfig(horizon=4))
    as_scene = sim.to_scenario()
    assert as_scene.scenario_id == scene.scenario_id
    assert as_scene.num_steps == 2 + 1 + 4
    assert as_scene.track(3).states[-1] == sim.trajectories[3][-1]
    assert not as_scene.track(8).valid[3]


def test_missing_sidecar(scene, random_model, tmp_path):
    scenario_file, sidecar = save_simulation(closed_loop(scene, random_model, RolloutConfig(horizon=1)), tmp_path)
    sidecar.unlink()
    with pytest.raises(ScenarioParseError) as info:
        load_simulation(scenario_file)
    assert "token log" in str(info.value)

import numpy as np
import pytest

from kinesim.core.action_codec import A_MAX, ZERO_TOKEN_FLAT, ActionToken, dequantize, dequantize_flat
from kinesim.core.errors import ScenarioParseError, TokenizerError
from kinesim.core.kinematics import AgentState, ControlAction, ctra_rollout, ctra_step
from kinesim.synthetic import GeneratorConfig, generate_synthetic
from kinesim.tokenizer import (
    detokenize,
    init_estimate,
    load_token_dataset,
    recovery_rate,
    save_token_dataset,
    solve_window,
    summarize_records,
    tokenize_all,
    tokenize_scenario,
    tokenize_track,
    window_cost,
)

DT = 0.5


def replay(start, flats):
    return [start] + ctra_rollout(start, [dequantize_flat(flat) for flat in flats], DT)


def test_init_estimate_differences_speed_and_heading():
    s0 = AgentState(x=0.0, y=0.0, theta=0.0, v=0.0)
    s1 = AgentState(x=0.0, y=0.0, theta=0.25, v=1.0)
    guess = init_estimate(s0, s1, DT)
    assert guess.a == pytest.approx(2.0)
    assert guess.w == pytest.approx(0.5)


def test_window_cost_weights():
    start = AgentState(x=0.0, y=0.0, theta=0.0, v=5.0)
    actions = [ControlAction(a=1.0, w=0.2)] * 3
    exact = ctra_rollout(start, actions, DT)
    assert window_cost(start, actions, exact, DT) == pytest.approx(0.0, abs=1e-20)

    shifted = list(exact)
    shifted[1] = shifted[1].model_copy(update={"x": shifted[1].x + 1.0})
    assert window_cost(start, actions, shifted, DT) == pytest.approx(1.0)

    turned = list(exact)
    turned[2] = AgentState(x=exact[2].x, y=exact[2].y, theta=exact[2].theta + 0.1, v=exact[2].v)
    assert window_cost(start, actions, turned, DT) == pytest.approx(0.04)


def test_masked_steps_do_not_count():
    start = AgentState(x=0.0, y=0.0, theta=0.0, v=5.0)
    actions = [ControlAction(a=0.0, w=0.0)] * 2
    targets = ctra_rollout(start, actions, DT)
    targets[1] = targets[1].model_copy(update={"y": 50.0})
    assert window_cost(start, actions, targets, DT, valid=[True, False]) == pytest.approx(0.0, abs=1e-20)


def test_solve_window_recovers_exact_actions():
    start = AgentState(x=0.0, y=0.0, theta=0.3, v=7.0)
    truth = [ControlAction(a=1.2, w=-0.3), ControlAction(a=-0.8, w=0.1), ControlAction(a=0.5, w=0.6)]
    targets = ctra_rollout(start, truth, DT)
    fitted = solve_window(start, targets, [ControlAction(a=0.0, w=0.0)] * 3, DT)
    for got, want in zip(fitted, truth):
        assert got.a == pytest.approx(want.a, abs=1e-4)
        assert got.w == pytest.approx(want.w, abs=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_solve_window_converges_from_a_perturbed_guess(seed):
    rng = np.random.default_rng(seed)
    start = AgentState(x=rng.uniform(-20, 20), y=rng.uniform(-20, 20), theta=rng.uniform(-3, 3), v=rng.uniform(3, 15))
    truth = [ControlAction(a=rng.uniform(-3, 3), w=rng.uniform(-1, 1)) for _ in range(3)]
    targets = ctra_rollout(start, truth, DT)
    guess = [ControlAction(a=u.a + rng.uniform(-1, 1), w=u.w + rng.uniform(-0.3, 0.3)) for u in truth]
    fitted = solve_window(start, targets, guess, DT)
    for got, want in zip(fitted, truth):
        assert got.a == pytest.approx(want.a, abs=1e-4)
        assert got.w == pytest.approx(want.w, abs=1e-4)
    assert window_cost(start, fitted, targets, DT) < 1e-8


def test_unreachable_window_saturates_at_the_bounds():
    start = AgentState(x=0.0, y=0.0, theta=0.0, v=5.0)
    cruise = ctra_rollout(start, [ControlAction(a=0.0, w=0.0)] * 3, DT)
    teleported = [target.model_copy(update={"x": target.x + 100.0}) for target in cruise]
    fitted = solve_window(start, teleported, [ControlAction(a=0.0, w=0.0)] * 3, DT)
    assert [u.a for u in fitted] == pytest.approx([A_MAX] * 3, abs=1e-9)
    assert all(abs(u.w) < 1e-6 for u in fitted)
    assert window_cost(start, fitted, teleported, DT) > 1000.0


def test_zero_token_track():
    states = replay(AgentState(x=0.0, y=0.0, theta=0.0, v=5.0), [ZERO_TOKEN_FLAT] * 8)
    result = tokenize_track(states, DT)
    assert result.flat_tokens == [ZERO_TOKEN_FLAT] * 8
    assert result.mean_residual == pytest.approx(0.0, abs=1e-12)


def test_stationary_agent_gets_zero_tokens():
    parked = AgentState(x=3.0, y=4.0, theta=1.0, v=0.0)
    result = tokenize_track([parked] * 6, DT)
    assert result.flat_tokens == [ZERO_TOKEN_FLAT] * 5


def test_detokenize_reproduces_controlled_states_exactly():
    rng = np.random.default_rng(5)
    start = AgentState(x=1.0, y=2.0, theta=0.5, v=6.0)
    # noisy log, so the controlled trajectory differs from it
    noisy = [start] + [
        state.model_copy(update={"x": state.x + rng.normal(0, 0.05), "y": state.y + rng.normal(0, 0.05)})
        for state in replay(start, rng.integers(20 * 63, 42 * 63, size=10))[1:]
    ]
    result = tokenize_track(noisy, DT)
    assert detokenize(start, result.tokens, DT) == result.ctl_states[1:]
    for j, token in enumerate(result.tokens):
        assert ctra_step(result.ctl_states[j], dequantize(token), DT) == result.ctl_states[j + 1]


def test_in_codebook_tracks_are_recovered():
    rng = np.random.default_rng(11)
    matched = total = 0
    for _ in range(5):
        ia = rng.integers(20, 43, size=20)
        iw = rng.integers(20, 43, size=20)
        truth = [ActionToken.from_indices(int(a), int(w)).flat for a, w in zip(ia, iw)]
        states = replay(AgentState(x=0.0, y=0.0, theta=float(rng.uniform(-3, 3)), v=8.0), truth)
        result = tokenize_track(states, DT)
        matched += sum(int(a == b) for a, b in zip(result.flat_tokens, truth))
        total += len(truth)
    assert matched / total >= 0.99


def test_invalid_window_holds_previous_token():
    token = ActionToken.from_indices(40, 31).flat
    states = replay(AgentState(x=0.0, y=0.0, theta=0.0, v=3.0), [token] * 6)
    valid = [True, True, True, False, False, False, False]
    result = tokenize_track(states, DT, k=3, valid=valid)
    assert result.flat_tokens[0] == token
    assert result.flat_tokens[3:] == [result.flat_tokens[2]] * 3


def test_short_track_is_rejected():
    with pytest.raises(TokenizerError):
        tokenize_track([AgentState(x=0.0, y=0.0, theta=0.0, v=0.0)], DT)


def test_invalid_first_state_is_rejected():
    states = replay(AgentState(x=0.0, y=0.0, theta=0.0, v=3.0), [ZERO_TOKEN_FLAT] * 3)
    with pytest.raises(TokenizerError):
        tokenize_track(states, DT, valid=[False, True, True, True])


def test_scenario_records_match_ground_truth(make_scenario, tmp_path):
    turn = ActionToken.from_indices(33, 36).flat
    scenario = make_scenario(
        [
            {"id": 1, "x": 0.0, "y": 0.0, "v": 6.0, "token": turn},
            {"id": 2, "x": 20.0, "y": 3.5, "v": 5.0},
            {"id": 3, "x": 40.0, "y": -3.5, "v": 4.0, "valid": [False] * 9},
        ]
    )
    tokenized = tokenize_scenario(scenario)
    assert sorted(tokenized) == [1, 2]

    records = tokenize_all([scenario])
    assert recovery_rate(records, {scenario.scenario_id: scenario}) == pytest.approx(1.0)
    assert summarize_records(records)["tokens"] == 16

    path = tmp_path / "tokens.jsonl"
    assert save_token_dataset(records, path) == 2
    assert load_token_dataset(path) == records


def test_recovery_rate_without_ground_truth_is_none(make_scenario):
    scenario = make_scenario([{"id": 1, "x": 0.0, "y": 0.0, "v": 6.0}])
    stripped = scenario.model_copy(update={"tracks": [t.model_copy(update={"gt_tokens": None}) for t in scenario.tracks]})
    records = tokenize_all([stripped])
    assert recovery_rate(records, {stripped.scenario_id: stripped}) is None


def test_corrupt_token_file_names_the_line(tmp_path):
    path = tmp_path / "tokens.jsonl"
    path.write_text('{"scenario_id": "a", "agent_id": 1, "dt": 0.5, "initial_state": [0, 0, 0, 0], "tokens": [1]}\n{"oops": 1}\n')
    with pytest.raises(ScenarioParseError) as info:
        load_token_dataset(path)
    assert info.value.line == 2


def test_smooth_tracks_stay_close_to_the_log():
    scenes = generate_synthetic(GeneratorConfig(curve_follow=3, intersection_turn=3, future_len=16, in_codebook=False), seed=2)
    gaps = []
    for scenario in scenes:
        for agent_id, result in tokenize_scenario(scenario).items():
            track = scenario.track(agent_id)
            if not all(track.valid):
                continue
            last, logged = result.ctl_states[-1], track.states[-1]
            gaps.append(np.hypot(last.x - logged.x, last.y - logged.y))
    assert gaps
    assert np.mean(gaps) <= 1.0

import math

import numpy as np
import pytest

from kinesim.core.errors import InvalidArgumentError, NonFiniteValueError
from kinesim.core.kinematics import (
    CTRA,
    AgentState,
    ControlAction,
    ctra_rollout,
    ctra_step,
    ctra_step_batch,
    wrap_angle,
    wrap_angle_array,
)


def state(x=0.0, y=0.0, theta=0.0, v=0.0):
    return AgentState(x=x, y=y, theta=theta, v=v)


def test_constant_speed_straight_line():
    nxt = ctra_step(state(v=2.0), ControlAction(a=0.0, w=0.0), 0.5)
    assert nxt.x == pytest.approx(1.0, abs=1e-12)
    assert nxt.y == pytest.approx(0.0, abs=1e-12)
    assert nxt.theta == pytest.approx(0.0, abs=1e-12)
    assert nxt.v == pytest.approx(2.0)


def test_acceleration_from_rest_facing_north():
    nxt = ctra_step(state(theta=math.pi / 2), ControlAction(a=2.0, w=0.0), 0.5)
    assert nxt.x == pytest.approx(0.0, abs=1e-12)
    assert nxt.y == pytest.approx(0.25, abs=1e-12)
    assert nxt.theta == pytest.approx(math.pi / 2)
    assert nxt.v == pytest.approx(1.0)


def test_constant_turn_at_speed():
    nxt = ctra_step(state(v=10.0), ControlAction(a=0.0, w=0.5), 0.5)
    assert nxt.x == pytest.approx(4.94808, abs=1e-4)
    assert nxt.y == pytest.approx(0.62177, abs=1e-4)
    assert nxt.theta == pytest.approx(0.25)
    assert nxt.v == pytest.approx(10.0)


@pytest.mark.parametrize(
    "action",
    [ControlAction(a=1.3, w=0.7), ControlAction(a=-2.0, w=-1.1), ControlAction(a=0.4, w=1e-6), ControlAction(a=0.0, w=0.0)],
)
def test_steps_compose(action):
    start = state(x=3.0, y=-1.0, theta=0.4, v=6.0)
    two_steps = ctra_step(ctra_step(start, action, 0.2), action, 0.3)
    one_step = ctra_step(start, action, 0.5)
    assert np.allclose(two_steps.to_array(), one_step.to_array(), atol=1e-9)


def test_small_yaw_rate_is_continuous_with_straight_motion():
    start = state(v=8.0)
    straight = ctra_step(start, ControlAction(a=1.0, w=0.0), 0.5)
    barely = ctra_step(start, ControlAction(a=1.0, w=1e-7), 0.5)
    assert np.allclose(straight.to_array(), barely.to_array(), atol=1e-7)


def test_wrap_angle():
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(2 * math.pi) == pytest.approx(0.0, abs=1e-15)
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    wrapped = wrap_angle_array(np.array([0.0, 2 * math.pi, -math.pi, 5.0]))
    assert np.allclose(wrapped, [0.0, 0.0, math.pi, 5.0 - 2 * math.pi])


def test_wrap_angle_rejects_nan():
    with pytest.raises(NonFiniteValueError):
        wrap_angle(float("nan"))


def test_state_heading_is_wrapped_on_construction():
    assert state(theta=2 * math.pi + 1.0).theta == pytest.approx(1.0)


def test_non_finite_state_is_rejected():
    with pytest.raises(ValueError):
        state(x=float("inf"))


@pytest.mark.parametrize("dt", [0.0, -0.5, float("nan")])
def test_bad_dt_is_rejected(dt):
    with pytest.raises(InvalidArgumentError):
        ctra_step(state(v=1.0), ControlAction(a=0.0, w=0.0), dt)


def test_rollout_excludes_initial_state():
    actions = [ControlAction(a=1.0, w=0.1)] * 4
    states = ctra_rollout(state(v=2.0), actions, 0.5)
    assert len(states) == 4
    assert states[-1] == ctra_step(states[-2], actions[-1], 0.5)


def test_rollout_needs_actions():
    with pytest.raises(InvalidArgumentError):
        ctra_rollout(state(), [], 0.5)


def test_batch_step_matches_scalar_step():
    rng = np.random.default_rng(0)
    states = np.column_stack([rng.normal(size=20), rng.normal(size=20), rng.uniform(-3, 3, 20), rng.uniform(0, 12, 20)])
    actions = np.column_stack([rng.uniform(-5, 5, 20), rng.uniform(-1.5, 1.5, 20)])
    actions[:3, 1] = 0.0
    batch = ctra_step_batch(states, actions, 0.5)
    for row in range(20):
        single = ctra_step(AgentState.from_array(states[row]), ControlAction.from_array(actions[row]), 0.5)
        assert np.allclose(batch[row], single.to_array(), atol=1e-12)


def test_transition_model_wraps_ctra():
    start = state(v=5.0)
    action = ControlAction(a=0.5, w=0.2)
    assert CTRA.step(start, action, 0.5) == ctra_step(start, action, 0.5)


def rk4_oracle(states, actions, dt, substeps=1000):
    """Fine fixed-step RK4 of x' = v cos(theta), y' = v sin(theta), theta' = w, v' = a"""

    def deriv(s):
        return np.column_stack([s[:, 3] * np.cos(s[:, 2]), s[:, 3] * np.sin(s[:, 2]), actions[:, 1], actions[:, 0]])

    s = states.copy()
    h = dt / substeps
    for _ in range(substeps):
        k1 = deriv(s)
        k2 = deriv(s + 0.5 * h * k1)
        k3 = deriv(s + 0.5 * h * k2)
        k4 = deriv(s + h * k3)
        s = s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return s


def test_closed_form_matches_fine_integration():
    rng = np.random.default_rng(42)
    n = 2000
    states = np.column_stack([rng.uniform(-50, 50, n), rng.uniform(-50, 50, n), rng.uniform(-3, 3, n), rng.uniform(0, 20, n)])
    actions = np.column_stack([rng.uniform(-5, 5, n), rng.uniform(-1.5, 1.5, n)])
    exact = ctra_step_batch(states, actions, 0.5)
    oracle = rk4_oracle(states, actions, 0.5)
    assert np.abs(exact[:, :2] - oracle[:, :2]).max() <= 1e-6
    assert np.abs(exact[:, 3] - oracle[:, 3]).max() <= 1e-9
    assert np.abs(wrap_angle_array(exact[:, 2] - oracle[:, 2])).max() <= 1e-9


def rigid_motion(current: AgentState, phi: float, tx: float, ty: float) -> AgentState:
    c, s = math.cos(phi), math.sin(phi)
    x, y = current.x, current.y
    return AgentState(x=c * x - s * y + tx, y=s * x + c * y + ty, theta=current.theta + phi, v=current.v)


def test_step_commutes_with_rigid_motion():
    rng = np.random.default_rng(7)
    for _ in range(300):
        start = state(x=rng.uniform(-80, 80), y=rng.uniform(-80, 80), theta=rng.uniform(-math.pi, math.pi), v=rng.uniform(0, 25))
        action = ControlAction(a=rng.uniform(-5, 5), w=rng.choice([0.0, 1e-6, rng.uniform(-1.5, 1.5)]))
        phi, tx, ty = rng.uniform(-math.pi, math.pi), rng.uniform(-100, 100), rng.uniform(-100, 100)
        dt = rng.choice([0.1, 0.5])

        moved_then_stepped = ctra_step(rigid_motion(start, phi, tx, ty), action, dt)
        stepped_then_moved = rigid_motion(ctra_step(start, action, dt), phi, tx, ty)
        assert moved_then_stepped.x == pytest.approx(stepped_then_moved.x, abs=1e-9)
        assert moved_then_stepped.y == pytest.approx(stepped_then_moved.y, abs=1e-9)
        assert moved_then_stepped.v == stepped_then_moved.v
        assert abs(wrap_angle(moved_then_stepped.theta - stepped_then_moved.theta)) <= 1e-12

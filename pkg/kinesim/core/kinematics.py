"""
Constant turn rate and acceleration (CTRA) kinematics.

State s = (x, y, theta, v), control u = (a, w). Over a step of length dt the
heading and speed change linearly and the position is the exact integral of
v(t) * (cos theta(t), sin theta(t)). The integral is written around the
mid-step heading so the same expression is stable for every yaw rate:

    dx + i dy = exp(i theta_m) * (vbar*dt*sinc(h) - i * (a*dt^2/2) * h * g(h))

with h = w*dt/2, theta_m = theta + h, vbar = v + a*dt/2 and
g(h) = (h cos h - sin h) / h^3.
"""

import math
from typing import List, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from kinesim.core.errors import InvalidArgumentError, NonFiniteValueError

TWO_PI = 2.0 * math.pi

# Below this yaw rate the straight-line limit (series form) is used.
OMEGA_EPS = 1e-4
_TAIL_SERIES_EPS = 1e-2


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]"""
    if not math.isfinite(theta):
        raise NonFiniteValueError(f"angle must be finite, got {theta}")
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    wrapped = np.remainder(theta + math.pi, TWO_PI) - math.pi
    return np.where(wrapped <= -math.pi, math.pi, wrapped)


class AgentState(BaseModel):
    """Pose plus signed longitudinal speed"""

    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    theta: float
    v: float

    @field_validator("x", "y", "v")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("state fields must be finite")
        return value

    @field_validator("theta")
    @classmethod
    def _wrapped(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("state fields must be finite")
        return wrap_angle(value)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "AgentState":
        x, y, theta, v = (float(value) for value in values)
        return cls(x=x, y=y, theta=theta, v=v)

    @property
    def pose(self) -> tuple:
        return (self.x, self.y, self.theta)


class ControlAction(BaseModel):
    """Longitudinal acceleration (m/s^2) and yaw rate (rad/s)"""

    model_config = ConfigDict(frozen=True)

    a: float
    w: float

    @field_validator("a", "w")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("control fields must be finite")
        return value

    def to_array(self) -> np.ndarray:
        return np.array([self.a, self.w], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ControlAction":
        a, w = (float(value) for value in values)
        return cls(a=a, w=w)


def _check_dt(dt: float) -> None:
    if not math.isfinite(dt) or dt <= 0.0:
        raise InvalidArgumentError(f"dt must be a positive finite number, got {dt}")


def _sinc(h: float) -> float:
    return 1.0 - h * h / 6.0 if abs(h) < OMEGA_EPS else math.sin(h) / h


def _cubic_tail(h: float) -> float:
    if abs(h) < _TAIL_SERIES_EPS:
        h2 = h * h
        return -1.0 / 3.0 + h2 / 30.0 - h2 * h2 / 840.0
    return (h * math.cos(h) - math.sin(h)) / (h * h * h)


def ctra_step(state: AgentState, action: ControlAction, dt: float) -> AgentState:
    """Advance one state by dt under a constant control"""
    _check_dt(dt)
    a, w = action.a, action.w
    h = 0.5 * w * dt
    if abs(w) < OMEGA_EPS:
        # straight-line limit; exactly (v*dt + a*dt^2/2) along theta at w == 0
        sinc = 1.0 - h * h / 6.0
        lateral = 0.5 * a * dt * dt * h * (-1.0 / 3.0 + h * h / 30.0)
    else:
        sinc = _sinc(h)
        lateral = 0.5 * a * dt * dt * h * _cubic_tail(h)
    along = (state.v * dt + 0.5 * a * dt * dt) * sinc
    theta_mid = state.theta + h
    cos_m, sin_m = math.cos(theta_mid), math.sin(theta_mid)
    return AgentState(
        x=state.x + along * cos_m + lateral * sin_m,
        y=state.y + along * sin_m - lateral * cos_m,
        theta=wrap_angle(state.theta + w * dt),
        v=state.v + a * dt,
    )


def ctra_rollout(initial: AgentState, actions: Sequence[ControlAction], dt: float) -> List[AgentState]:
    """Chain ctra_step over an action sequence; result excludes the initial state"""
    if len(actions) == 0:
        raise InvalidArgumentError("ctra_rollout needs at least one action")
    states: List[AgentState] = []
    current = initial
    for action in actions:
        current = ctra_step(current, action, dt)
        states.append(current)
    return states


def ctra_step_batch(states: np.ndarray, actions: np.ndarray, dt: float) -> np.ndarray:
    """Vectorized transition for arrays of shape (N, 4) and (N, 2).

    Same expressions as ctra_step; used inside optimizers where bit-level
    agreement with the scalar path is not required.
    """
    _check_dt(dt)
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    a, w = actions[..., 0], actions[..., 1]
    h = 0.5 * w * dt
    h2 = h * h
    small = np.abs(h) < _TAIL_SERIES_EPS
    safe_h = np.where(h == 0.0, 1.0, h)
    sinc = np.where(np.abs(w) < OMEGA_EPS, 1.0 - h2 / 6.0, np.sin(safe_h) / safe_h)
    tail = np.where(
        small,
        -1.0 / 3.0 + h2 / 30.0 - h2 * h2 / 840.0,
        (safe_h * np.cos(safe_h) - np.sin(safe_h)) / (safe_h * safe_h * safe_h),
    )
    along = (states[..., 3] * dt + 0.5 * a * dt * dt) * sinc
    lateral = 0.5 * a * dt * dt * h * tail
    theta_mid = states[..., 2] + h
    cos_m, sin_m = np.cos(theta_mid), np.sin(theta_mid)
    out = np.empty(np.broadcast(states[..., 0], a).shape + (4,), dtype=np.float64)
    out[..., 0] = states[..., 0] + along * cos_m + lateral * sin_m
    out[..., 1] = states[..., 1] + along * sin_m - lateral * cos_m
    out[..., 2] = wrap_angle_array(states[..., 2] + w * dt)
    out[..., 3] = states[..., 3] + a * dt
    return out


class TransitionModel(Protocol):
    name: str

    def step(self, state: AgentState, action: ControlAction, dt: float) -> AgentState:
        ...

    def step_batch(self, states: np.ndarray, actions: np.ndarray, dt: float) -> np.ndarray:
        ...


class CTRAModel:
    """The transition law used throughout the toolkit"""

    name = "ctra"

    def step(self, state: AgentState, action: ControlAction, dt: float) -> AgentState:
        return ctra_step(state, action, dt)

    def step_batch(self, states: np.ndarray, actions: np.ndarray, dt: float) -> np.ndarray:
        return ctra_step_batch(states, actions, dt)


CTRA = CTRAModel()

"""
63 x 63 discrete codebook over (acceleration, yaw rate).

Uniform bins with centre representatives; the odd bin count puts the zero
action exactly at index (31, 31). Flat index is acceleration-major.
"""

import math
from typing import Iterator

from pydantic import BaseModel, ConfigDict, model_validator

from kinesim.core.errors import NonFiniteValueError, TokenIndexError
from kinesim.core.kinematics import ControlAction

BINS = 63
VOCAB_SIZE = BINS * BINS
START_TOKEN = VOCAB_SIZE  # "no previous action" slot of the U-embedding table

A_MAX = 5.0
W_MAX = 1.5
A_BIN = 2.0 * A_MAX / BINS
W_BIN = 2.0 * W_MAX / BINS

ZERO_INDEX = BINS // 2
ZERO_TOKEN_FLAT = ZERO_INDEX * BINS + ZERO_INDEX  # 1984


class ActionToken(BaseModel):
    model_config = ConfigDict(frozen=True)

    ia: int
    iw: int
    flat: int

    @model_validator(mode="after")
    def _consistent(self) -> "ActionToken":
        if not (0 <= self.ia < BINS and 0 <= self.iw < BINS):
            raise ValueError(f"bin indices out of range: ({self.ia}, {self.iw})")
        if self.flat != self.ia * BINS + self.iw:
            raise ValueError(f"flat index {self.flat} does not match ({self.ia}, {self.iw})")
        return self

    @classmethod
    def from_indices(cls, ia: int, iw: int) -> "ActionToken":
        if not (0 <= ia < BINS and 0 <= iw < BINS):
            raise TokenIndexError(f"bin indices out of range: ({ia}, {iw})")
        return cls(ia=ia, iw=iw, flat=ia * BINS + iw)

    @classmethod
    def from_flat(cls, flat: int) -> "ActionToken":
        if not 0 <= flat < VOCAB_SIZE:
            raise TokenIndexError(f"flat token index out of range: {flat}")
        ia, iw = divmod(int(flat), BINS)
        return cls(ia=ia, iw=iw, flat=int(flat))


ZERO_TOKEN = ActionToken.from_flat(ZERO_TOKEN_FLAT)


def _clamp(value: float, bound: float) -> float:
    return min(max(value, -bound), bound)


def _check_finite(action: ControlAction) -> None:
    if not (math.isfinite(action.a) and math.isfinite(action.w)):
        raise NonFiniteValueError(f"action must be finite, got ({action.a}, {action.w})")


def in_range(action: ControlAction) -> bool:
    return -A_MAX <= action.a <= A_MAX and -W_MAX <= action.w <= W_MAX


def quantize(action: ControlAction) -> ActionToken:
    """Bin a continuous action; out-of-range values clamp into the edge bins"""
    _check_finite(action)
    ia = min(int(math.floor((_clamp(action.a, A_MAX) + A_MAX) / A_BIN)), BINS - 1)
    iw = min(int(math.floor((_clamp(action.w, W_MAX) + W_MAX) / W_BIN)), BINS - 1)
    return ActionToken.from_indices(ia, iw)


def dequantize(token: ActionToken) -> ControlAction:
    if not (0 <= token.ia < BINS and 0 <= token.iw < BINS):
        raise TokenIndexError(f"bin indices out of range: ({token.ia}, {token.iw})")
    # centre = -max + (i + 0.5) * width, written so the middle bin is exactly 0.0
    return ControlAction(
        a=(2 * token.ia + 1 - BINS) * A_MAX / BINS,
        w=(2 * token.iw + 1 - BINS) * W_MAX / BINS,
    )


def dequantize_flat(flat: int) -> ControlAction:
    return dequantize(ActionToken.from_flat(flat))


def _nearest_bin(value: float, bound: float, width: float) -> int:
    # centres sit on integer coordinates; ties resolve to the lower index
    coordinate = (_clamp(value, bound) + bound) / width - 0.5
    return min(max(int(math.ceil(coordinate - 0.5)), 0), BINS - 1)


def nearest_token(action: ControlAction) -> ActionToken:
    """Nearest bin centre in range-normalized coordinates.

    The grid is separable and uniform, so the nearest centre is the per-axis
    nearest centre.
    """
    _check_finite(action)
    return ActionToken.from_indices(
        _nearest_bin(action.a, A_MAX, A_BIN),
        _nearest_bin(action.w, W_MAX, W_BIN),
    )


def all_tokens() -> Iterator[ActionToken]:
    for flat in range(VOCAB_SIZE):
        yield ActionToken.from_flat(flat)

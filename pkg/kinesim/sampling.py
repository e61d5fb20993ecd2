"""
Action samplers over the 3969-way logits.

Sampler specs are short strings: "argmax", "top_p:0.9", "temperature:0.8".
Every stochastic draw goes through a numpy Generator passed by the caller.
"""

from typing import List, Protocol, Tuple

import numpy as np

from kinesim.core.errors import InvalidArgumentError


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.asarray(logits, dtype=np.float64) - np.max(logits)
    weights = np.exp(shifted)
    return weights / weights.sum()


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cumulative = np.cumsum(probs)
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(index, len(probs) - 1)


def top_p_support(probs: np.ndarray, p: float) -> Tuple[np.ndarray, np.ndarray]:
    """Smallest descending-probability prefix with mass >= p, renormalized.

    Equal probabilities keep ascending index order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    if p >= 1.0:
        kept = order
    else:
        cumulative = np.cumsum(probs[order])
        k = min(int(np.searchsorted(cumulative, p, side="left")) + 1, len(order))
        kept = order[:k]
    mass = probs[kept]
    return kept, mass / mass.sum()


class ArgmaxSampler:
    name = "argmax"

    def __call__(self, logits: np.ndarray, rng: np.random.Generator) -> int:
        # np.argmax returns the first maximum, i.e. the lowest flat index
        return int(np.argmax(logits))

    def spec(self) -> str:
        return "argmax"


class TopPSampler:
    name = "top_p"

    def __init__(self, p: float = 0.9):
        if not 0.0 < p <= 1.0:
            raise InvalidArgumentError(f"top_p needs 0 < p <= 1, got {p}")
        self.p = p

    def __call__(self, logits: np.ndarray, rng: np.random.Generator) -> int:
        kept, probs = top_p_support(softmax(logits), self.p)
        return int(kept[_draw(probs, rng)])

    def spec(self) -> str:
        return f"top_p:{self.p}"


class TemperatureSampler:
    name = "temperature"

    def __init__(self, temperature: float = 1.0):
        if not temperature > 0.0:
            raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
        self.temperature = temperature

    def __call__(self, logits: np.ndarray, rng: np.random.Generator) -> int:
        return _draw(softmax(np.asarray(logits) / self.temperature), rng)

    def spec(self) -> str:
        return f"temperature:{self.temperature}"


class Sampler(Protocol):
    name: str

    def __call__(self, logits: np.ndarray, rng: np.random.Generator) -> int:
        ...

    def spec(self) -> str:
        ...


def _number(spec: str, arg: str, default: float) -> float:
    if not arg:
        return default
    try:
        return float(arg)
    except ValueError as exc:
        raise InvalidArgumentError(f"bad sampler argument in '{spec}'") from exc


def parse_sampler(spec: str) -> Sampler:
    """Build a sampler from its spec string"""
    name, _, arg = spec.strip().partition(":")
    name = name.lower()
    if name == "argmax" and not arg:
        return ArgmaxSampler()
    if name in ("top_p", "top-p"):
        return TopPSampler(_number(spec, arg, 0.9))
    if name == "temperature":
        return TemperatureSampler(_number(spec, arg, 1.0))
    raise InvalidArgumentError(f"unknown sampler '{spec}' (use argmax, top_p:<p> or temperature:<t>)")


def spawn_rngs(seed: int, count: int) -> List[np.random.Generator]:
    """Independent generators reproducible per (seed, index)"""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]

"""Seeded random streams and the sampling primitives used by the Gibbs engines.

Streams are PCG64 generators keyed by ``(seed, stream_id)`` through
``SeedSequence(seed, spawn_key=(stream_id,))``; children are spawned the same
way, so parallel chains and bootstrap replicates never share state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._truncgamma import check_trunc_params, trunc_inv_gamma_draw

__all__ = [
    "RngStream",
    "as_generator",
    "draw_normal",
    "draw_inverse_gamma",
    "draw_trunc_inverse_gamma",
    "draw_beta",
    "draw_bernoulli",
    "draw_student_t",
]

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    """A reproducible, single-owner random stream."""

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not (0 <= int(self.seed) <= _MASK64 and 0 <= int(self.stream_id) <= _MASK64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")
        self.seed = int(self.seed)
        self.stream_id = int(self.stream_id)

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))

    def generator(self) -> np.random.Generator:
        """The stream's generator, created lazily and then reused."""
        if self._gen is None:
            self._gen = np.random.Generator(np.random.PCG64(self.seed_sequence()))
        return self._gen

    def child(self, index: int) -> np.random.Generator:
        """A fresh generator independent of this stream and of other children."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, int(index)))
        return np.random.Generator(np.random.PCG64(ss))

    def children(self, k: int) -> list[np.random.Generator]:
        return [self.child(i) for i in range(k)]


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an RngStream, an int seed or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return np.random.default_rng(rng)


def draw_normal(rng, mean: float, variance: float) -> float:
    if not (variance >= 0.0) or math.isinf(variance):
        raise ValueError(f"variance must be finite and non-negative, got {variance}")
    z = as_generator(rng).standard_normal()
    if variance == 0.0:
        return float(mean)
    return float(mean + math.sqrt(variance) * z)


def draw_inverse_gamma(rng, shape: float, rate: float) -> float:
    """Density proportional to ``t**(-shape-1) exp(-rate/t)``."""
    if not (shape > 0.0 and rate > 0.0):
        raise ValueError(f"shape and rate must be positive, got ({shape}, {rate})")
    return float(1.0 / as_generator(rng).gamma(shape, 1.0 / rate))


_TRUNC_ERRORS = {
    1: "truncation interval must satisfy 0 <= lower < upper",
    2: "rate must be finite and non-negative",
    3: "truncated inverse gamma is not integrable for these parameters",
}


def draw_trunc_inverse_gamma(rng, shape: float, rate: float, lower: float = 0.0,
                             upper: float = math.inf) -> float:
    """Inverse gamma restricted to ``(lower, upper)``.

    ``shape`` may be zero or negative when ``upper`` is finite, and
    ``rate`` may be zero (power-law density) when the interval keeps the
    density integrable.
    """
    shape, rate, lower, upper = float(shape), float(rate), float(lower), float(upper)
    code = check_trunc_params(shape, rate, lower, upper)
    if code:
        raise ValueError(
            f"{_TRUNC_ERRORS[code]}: shape={shape}, rate={rate}, interval=({lower}, {upper})"
        )
    return float(trunc_inv_gamma_draw(as_generator(rng), shape, rate, lower, upper))


def draw_beta(rng, a: float, b: float) -> float:
    if not (a > 0.0 and b > 0.0):
        raise ValueError(f"beta parameters must be positive, got ({a}, {b})")
    return float(as_generator(rng).beta(a, b))


def draw_bernoulli(rng, prob: float) -> int:
    if not (0.0 <= prob <= 1.0):
        raise ValueError(f"probability must lie in [0, 1], got {prob}")
    return int(as_generator(rng).random() < prob)


def draw_student_t(rng, dof: float) -> float:
    if not (dof > 0.0):
        raise ValueError(f"degrees of freedom must be positive, got {dof}")
    return float(as_generator(rng).standard_t(dof))

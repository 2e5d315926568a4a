"""Seeded pseudo-random streams used throughout the package.

Everything random (dataset generation, network init, minibatch indices,
base-distribution draws) goes through SplitMix64 so that runs are
bit-reproducible from a single integer seed, independent of platform RNG
library versions. Normal variates come from the Box-Muller transform over
the uniform stream.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """Counter-based 64-bit generator (splitmix64 output function)."""

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def _next_block(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64)
            z = self._state + idx * _GAMMA
            self._state = z[-1]
            z = (z ^ (z >> np.uint64(30))) * _M1 & _MASK
            z = (z ^ (z >> np.uint64(27))) * _M2 & _MASK
            return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform in [0, 1), 53-bit resolution."""
        bits = self._next_block(n)
        return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        # u1 = 0 would send the radius to infinity
        u1 = np.maximum(u1, 2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers uniform in [0, high), with replacement."""
        if high <= 0:
            raise ValueError("high must be positive")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def shuffled_indices(self, n: int) -> np.ndarray:
        """A permutation of range(n) (Fisher-Yates order by sort keys)."""
        return np.argsort(self._next_block(n), kind="stable")

    def child_seeds(self, n: int) -> list[int]:
        """Independent seeds for derived streams."""
        return [int(v) for v in self._next_block(n)]

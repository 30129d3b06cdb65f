"""SplitMix64 stream used for parameter initialisation.

SplitMix64 (Steele, Lea & Flood 2014) keeps a single 64-bit counter and
emits ``mix(seed + i * 0x9E3779B97F4A7C15)`` for i = 1, 2, ...  It is tiny,
has no hidden state beyond the counter, and is trivial to reproduce in any
language, which is why weight init goes through it rather than numpy's
bit generators.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix(self.seed + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_sym(self, shape, bound: float) -> np.ndarray:
        """float32 array uniform in [-bound, bound)."""
        n = int(np.prod(shape))
        u = self.uniform(n)
        return ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape)

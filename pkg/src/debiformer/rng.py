"""Counter-based pseudo-random streams for reproducible weight init.

Stream element i is `mix64(seed + (i+1) * GOLDEN)` where `mix64` is the
splitmix64 finalizer.  Everything is pure uint64 arithmetic modulo 2^64 on
vectorized numpy arrays, so a given seed yields a bitwise identical stream
on every platform, independent of chunking.  Named sub-streams hash the
name into the seed so per-tensor init does not depend on creation order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_FNV_BASIS = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise over uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)


def fnv1a64(name: str) -> int:
    h = _FNV_BASIS
    for b in name.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(seed: int, name: str) -> int:
    """Seed for the sub-stream dedicated to `name`."""
    mixed = mix64(np.uint64((seed & _MASK64) ^ fnv1a64(name)))
    return int(mixed)


class Rng:
    """Counter-based generator: position in the stream is explicit state."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = np.uint64(seed & _MASK64)
        self.counter = counter

    def for_name(self, name: str) -> "Rng":
        return Rng(derive_seed(int(self.seed), name))

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(self.seed + idx * GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53 random mantissa bits each."""
        bits = self.u64(n) >> np.uint64(11)
        return bits.astype(np.float64) * (2.0 ** -53)

    def trunc_normal(self, shape, std: float = 0.02, limit: float = 2.0, dtype=np.float32) -> np.ndarray:
        """Normal(0, std) truncated to +-limit standard deviations, via the
        inverse CDF applied to a uniform sample of the truncated mass."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        lo = ndtr(-limit)
        hi = ndtr(limit)
        p = lo + self.uniform(n) * (hi - lo)
        x = ndtri(p) * std
        return x.reshape(shape).astype(dtype)

"""Deterministic PRNG: xoshiro256++ seeded through SplitMix64.

All initialization, shuffling, and sampling in the package goes through
this generator so runs are reproducible independent of platform and of
numpy version.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int):
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_seed(seed: int, label: str) -> int:
    """Deterministic child seed for a named stream."""
    state = seed & _MASK
    for byte in label.encode("utf-8"):
        state, _ = splitmix64(state ^ byte)
    _, out = splitmix64(state)
    return out


class Rng:
    """xoshiro256++ generator with numpy-array convenience methods."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        state = self.seed
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1)."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high) via rejection sampling."""
        n = high - low
        if n <= 0:
            raise ValueError("empty integer range")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return low + (u % n)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray | float:
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        u = np.array([self.random() for _ in range(n)], dtype=np.float64)
        return (low + (high - low) * u).reshape(size)

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller standard normals, scaled."""
        n = int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            if i + 1 < n:
                out[i + 1] = r * math.sin(2.0 * math.pi * u2)
            i += 2
        return (mean + std * out).reshape(size)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def child(self, label: str) -> "Rng":
        """Independent named substream."""
        return Rng(derive_seed(self.seed, label))

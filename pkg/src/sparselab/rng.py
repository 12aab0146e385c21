"""Deterministic PRNG: xoshiro256** seeded through splitmix64.

Every source of randomness in a run flows through one of these generators.
Distinct purposes (weight init, data generation, shuffling, dropout, ...)
use sub-streams derived from the run seed by fixed offsets, so adding a new
consumer never perturbs existing streams.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1

# Fixed sub-seed offsets. Values are arbitrary but frozen: changing them
# changes every seeded run.
STREAM_INIT = 0x1
STREAM_DATA = 0x2
STREAM_SHUFFLE = 0x3
STREAM_DROPOUT = 0x4
STREAM_SHARPNESS = 0x5
STREAM_HEAD_INIT = 0x6


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator with named sub-streams.

    Identical seeds produce identical streams; `stream(offset)` derives an
    independent generator from the original seed plus a fixed offset.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        s = self.seed
        state = []
        for _ in range(4):
            s, z = _splitmix64(s)
            state.append(z)
        self._s = state

    def stream(self, offset: int) -> "Rng":
        return Rng(self.seed + offset)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform f64 in [0, 1) from the high 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        nxt = self.next_u64
        scale = 1.0 / (1 << 53)
        for i in range(n):
            out[i] = (nxt() >> 11) * scale
        return out

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        u1 = 1.0 - u[0::2]  # in (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def below(self, n: int) -> int:
        """Integer in [0, n) by modulo reduction (bias is irrelevant here)."""
        return self.next_u64() % n

    def shuffle(self, items: np.ndarray) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        self.shuffle(idx)
        return idx

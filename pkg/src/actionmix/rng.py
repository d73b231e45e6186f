"""Deterministic random numbers: xoshiro256** seeded through SplitMix64.

The generator is fixed here rather than taken from the platform so that a
seed pins every draw bit-exactly, on any machine, forever. State words are
derived from the seed with SplitMix64; 64-bit outputs come from the
xoshiro256** scrambler; doubles take the top 53 bits. Normals use the
Box-Muller transform with one cached spare.

Reference constants: SplitMix64 increment 0x9E3779B97F4A7C15 and mixers
0xBF58476D1CE4E5B9 / 0x94D049BB133111EB; xoshiro256** rotates (7, 45) and
scrambles with *5 / rot 7 / *9.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """Seeded stream of uniforms/normals with reproducible draw order."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        s = self.seed
        state = []
        for _ in range(4):
            s, word = _splitmix64(s)
            state.append(word)
        self._s = state
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return lo + (hi - lo) * u

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return mean + std * z
        # Box-Muller; u1 is kept strictly positive for the log.
        u1 = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        u2 = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        if u1 <= 0.0:
            u1 = 2.0**-53
        radius = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = radius * math.sin(theta)
        return mean + std * radius * math.cos(theta)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n), rejection sampled (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = _MASK + 1 - ((_MASK + 1) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def fill_uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        out = np.empty(int(np.prod(shape)) if shape else 1)
        for i in range(out.size):
            out[i] = self.uniform(lo, hi)
        return out.reshape(shape)

    def fill_normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        out = np.empty(int(np.prod(shape)) if shape else 1)
        for i in range(out.size):
            out[i] = self.normal(mean, std)
        return out.reshape(shape)

    def spawn(self, key: int) -> "Rng":
        """An independent child stream; same (seed, key) gives the same child."""
        _, mixed = _splitmix64((self.seed ^ (key * 0xA0761D6478BD642F)) & _MASK)
        return Rng(mixed)

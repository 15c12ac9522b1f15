"""Deterministic pseudo-random numbers from a seeded splitmix64 stream.

splitmix64 advances an internal state by the golden-gamma constant
0x9E3779B97F4A7C15 and returns a mixed copy of it (multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB, from the reference
implementation). Because the state after i draws is seed + i * gamma, the
generator is counter-based here: bulk numpy generation and one-at-a-time
scalar generation produce the identical stream.
"""

from __future__ import annotations

import math

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


class Rng:
    """Seeded splitmix64 stream with uniform, normal, and integer draws."""

    def __init__(self, seed: int):
        self._seed = seed & _MASK
        self._count = 0

    def _u64_block(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        z = np.uint64(self._seed) + idx * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def next_u64(self) -> int:
        return int(self._u64_block(1)[0])

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1), 53-bit resolution."""
        return (self._u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller (two uniforms per value)."""
        u1 = self.uniforms(n)
        u2 = self.uniforms(n)
        # 1 - u1 lies in (0, 1], so the log is finite.
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * math.pi * u2)

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError(f"randbelow requires n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

"""Deterministic random number generation.

The generator is xoshiro256** (Blackman & Vigna, 2018) with its state
expanded from a 64-bit seed by splitmix64. Both algorithms are implemented
bit-exactly below, so equal seeds produce equal streams on every platform
and Python version. The derived-value recipes are part of the contract:

* ``next_u64``   -- one xoshiro256** step, 64-bit unsigned output.
* ``uniform()``  -- ``(next_u64() >> 11) * 2**-53``, a float64 in [0, 1).
* ``normal()``   -- Box-Muller on two uniforms; ``u1`` is redrawn while it
  is exactly 0.0; the pair ``(r*cos(a), r*sin(a))`` with ``r = sqrt(-2 ln u1)``
  and ``a = 2*pi*u2`` is consumed in that order, the second value cached.
* ``randrange(n)`` -- ``next_u64() % n`` (modulo; the bias is negligible for
  the small ranges used here and the recipe is trivially portable).
* ``derive(*keys)`` -- child seed obtained by folding integer keys into the
  parent seed with splitmix64 (see ``_fold``); children are independent
  streams fully determined by ``(seed, keys)``.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)), state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def _fold(seed: int, keys: tuple[int, ...]) -> int:
    """Fold integer keys into a seed: h = splitmix64_out(h ^ key) per key."""
    h = seed & _MASK64
    for k in keys:
        h, _ = _splitmix64(h ^ (k & _MASK64))
    return h


class Rng:
    """xoshiro256** stream seeded from a single 64-bit integer."""

    __slots__ = ("seed", "_s", "_spare_normal")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        state = self.seed
        s = []
        for _ in range(4):
            out, state = _splitmix64(state)
            s.append(out)
        if not any(s):  # all-zero state is the one forbidden xoshiro state
            s[0] = 1
        self._s = s
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """Float64 in [0, 1) from the top 53 bits of one output."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def normal(self) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        u1 = self.uniform()
        while u1 == 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        a = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(a)
        return r * math.cos(a)

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"randrange needs n >= 1, got {n}")
        return self.next_u64() % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.randrange(hi - lo + 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, descending index, j = randrange(i + 1)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream determined by (seed, keys)."""
        return Rng(_fold(self.seed, keys))

    def normals(self, shape: tuple[int, ...]) -> np.ndarray:
        n = 1
        for d in shape:
            n *= d
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal()
        return out.reshape(shape)

    def uniforms(self, shape: tuple[int, ...], lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = 1
        for d in shape:
            n *= d
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = lo + (hi - lo) * self.uniform()
        return out.reshape(shape)

"""Deterministic pseudo-random streams with a fixed, documented algorithm.

Every random decision in this package (parameter init, data synthesis,
shuffling, augmentation coin flips) draws from these streams, never from
the platform RNG, so results are bit-reproducible across machines.

Algorithm: counter-mode xorshift64*. Draw ``i`` of a stream with key ``k``
is computed as

    s_i = splitmix64_mix(k + (i + 1) * GOLDEN)   (mod 2^64, forced nonzero)
    out = xorshift64*(s_i)

where ``splitmix64_mix`` is the standard SplitMix64 finalizer
(shift/multiply constants 30, 0xBF58476D1CE4E5B9, 27, 0x94D049BB133111EB,
31), ``GOLDEN`` is 0x9E3779B97F4A7C15, and one xorshift64* step uses shifts
(12, 25, 27) and multiplier 0x2545F4914F6CDD1D.  Because each draw mixes an
independent counter value, scalar draws and vectorized array fills produce
the same sequence.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_SM_MUL1 = 0xBF58476D1CE4E5B9
_SM_MUL2 = 0x94D049BB133111EB
_XS_MUL = 0x2545F4914F6CDD1D


def splitmix64_mix(z: int) -> int:
    """SplitMix64 output mix of a 64-bit state (scalar)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _SM_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _SM_MUL2) & MASK64
    return z ^ (z >> 31)


def xorshift64star(s: int) -> int:
    """One xorshift64* step (scalar). The state must be nonzero."""
    s &= MASK64
    s ^= s >> 12
    s ^= (s << 25) & MASK64
    s ^= s >> 27
    return (s * _XS_MUL) & MASK64


def _mix_counters(key: int, counters: np.ndarray) -> np.ndarray:
    """Vectorized draw formula over an array of uint64 counters."""
    k = np.uint64(key)
    z = (k + counters * np.uint64(GOLDEN)).astype(np.uint64)
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(_SM_MUL1)).astype(np.uint64)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(_SM_MUL2)).astype(np.uint64)
    z = z ^ (z >> np.uint64(31))
    z = np.where(z == 0, np.uint64(GOLDEN), z)
    z = z ^ (z >> np.uint64(12))
    z = z ^ ((z << np.uint64(25)) & np.uint64(MASK64))
    z = z ^ (z >> np.uint64(27))
    return (z * np.uint64(_XS_MUL)).astype(np.uint64)


class RandomStream:
    """A named, forkable stream of deterministic 64-bit draws."""

    def __init__(self, seed: int, _key: int | None = None):
        self._key = splitmix64_mix(seed) if _key is None else _key
        self._counter = 0

    def child(self, tag: int) -> "RandomStream":
        """Derive an independent substream; child(i) of a fixed stream is stable."""
        return RandomStream(0, _key=splitmix64_mix(self._key ^ splitmix64_mix(tag + GOLDEN)))

    def next_u64(self) -> int:
        self._counter += 1
        s = splitmix64_mix((self._key + self._counter * GOLDEN) & MASK64)
        if s == 0:
            s = GOLDEN
        return xorshift64star(s)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Uniform double in [lo, hi) from the top 53 bits of a draw."""
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo reduction; bias is < n / 2^64."""
        if n <= 0:
            raise ValueError(f"randint needs n >= 1, got {n}")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0,
                      dtype=np.float64) -> np.ndarray:
        """Array fill consuming the same counter sequence as scalar draws."""
        n = int(np.prod(shape)) if shape else 1
        counters = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        bits = _mix_counters(self._key, counters)
        u = (bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return (lo + (hi - lo) * u).reshape(shape).astype(dtype)

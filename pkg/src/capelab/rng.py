"""Portable deterministic randomness built on splitmix64.

Every sampling site in the package draws from a `Stream` whose seed is derived
from a master seed plus explicit stream tags, so output `i` of any stream is a
pure function of (master seed, tags, i). The generator is the splitmix64
finalizer over a Weyl sequence; it has no platform- or library-version
dependence, which keeps corpora, model initialization, and shuffles
reproducible bit for bit.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *tags: int | str) -> int:
    """Hash a master seed and a sequence of stream tags into a stream seed.

    Tags name independent sampling purposes ("example", 17, "shuffle", ...);
    distinct tag sequences give statistically independent streams.
    """
    z = _mix((master + _GOLDEN) & _MASK)
    for tag in tags:
        data = tag.encode("utf-8") if isinstance(tag, str) else int(tag).to_bytes(8, "little", signed=True)
        for b in data:
            z = _mix((z + b + _GOLDEN) & _MASK)
    return z


class Stream:
    """Sequential splitmix64 stream with the samplers the package needs."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased via rejection sampling."""
        if n <= 0:
            raise ValueError(f"randbelow needs n > 0, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.randbelow(hi - lo + 1)

    def choice(self, seq):
        return seq[self.randbelow(len(seq))]

    def sample(self, seq, k: int) -> list:
        """k distinct elements of seq, order randomized (partial Fisher-Yates)."""
        pool = list(seq)
        if not 0 <= k <= len(pool):
            raise ValueError(f"cannot sample {k} of {len(pool)}")
        for i in range(k):
            j = i + self.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def gauss(self) -> float:
        """Standard normal via Box-Muller (one value per uniform pair)."""
        u1 = max(self.random(), 2.0**-53)
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

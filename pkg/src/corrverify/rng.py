"""Deterministic seeding helpers.

All randomness in the package flows from one explicit master seed.  Derived
seeds are produced by hashing the master seed together with a name path
(e.g. ``derive_seed(seed, "benchmark", "query", 7)``), which keeps every
component reproducible and independent of generation order or platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, *path) -> int:
    """Stable 64-bit seed for the component named by ``path``."""
    h = hashlib.sha256()
    h.update(int(master_seed).to_bytes(8, "little", signed=False))
    for part in path:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def generator(master_seed: int, *path) -> np.random.Generator:
    """numpy Generator seeded from the named derivation path."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, *path)))


class Lcg64:
    """Minimal 64-bit linear congruential generator.

    Used where bit-portable sampling matters (RANSAC hypothesis draws):
    the stream depends only on integer arithmetic, never on numpy version.
    Constants are Knuth's MMIX multiplier/increment.
    """

    MUL = 6364136223846793005
    INC = 1442695040888963407

    def __init__(self, seed: int):
        self.state = (int(seed) ^ 0x9E3779B97F4A7C15) & _MASK64
        # one warm-up step decorrelates small seeds
        self._step()

    def _step(self) -> int:
        self.state = (self.state * self.MUL + self.INC) & _MASK64
        return self.state

    def next_u32(self) -> int:
        # top bits have the longest period
        return self._step() >> 32

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection of the biased tail."""
        if n <= 0:
            raise ValueError("bound must be positive")
        lim = (1 << 32) - ((1 << 32) % n)
        while True:
            v = self.next_u32()
            if v < lim:
                return v % n

    def sample_distinct(self, n: int, k: int) -> list:
        """k distinct indices in [0, n), order of first draw."""
        if k > n:
            raise ValueError("cannot draw more distinct values than the range")
        out = []
        seen = set()
        while len(out) < k:
            v = self.below(n)
            if v not in seen:
                seen.add(v)
                out.append(v)
        return out

"""Portable random streams.

Noise and fold shuffling use PCG32 (XSH-RR, 64-bit state) so that the same
seed produces the same bits in any implementation, independent of numpy's
generator internals.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
PCG_MULT = 6364136223846793005


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (the state is advanced first)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def sample_key(sample_id) -> int:
    """Integer key for a sample id: ints are used as-is, strings hashed with FNV-1a."""
    if isinstance(sample_id, (int, np.integer)):
        return int(sample_id) & MASK64
    return fnv1a64(str(sample_id))


class PCG32:
    """PCG-XSH-RR 64/32, seeded like the reference ``pcg32_srandom_r``."""

    def __init__(self, initstate: int, initseq: int = 0xDA3E39CB94B95BDB):
        self.state = 0
        self.inc = ((initseq << 1) | 1) & MASK64
        self.next_u32()
        self.state = (self.state + (initstate & MASK64)) & MASK64
        self.next_u32()

    @classmethod
    def from_seed(cls, seed: int) -> "PCG32":
        """Derive state and stream from one 64-bit seed via splitmix64."""
        s1 = splitmix64(seed & MASK64)
        s2 = splitmix64(s1)
        return cls(s1, s2)

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * PCG_MULT + self.inc) & MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def bounded(self, bound: int) -> int:
        """Unbiased integer in [0, bound) (rejection as in ``pcg32_boundedrand_r``)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = (-bound & 0xFFFFFFFF) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def uniform_open0(self) -> float:
        """Uniform in (0, 1]; never 0, so it is safe under ``log``."""
        return (self.next_u32() + 1) / 4294967296.0

    def normals(self, count: int) -> np.ndarray:
        """``count`` standard normals by Box-Muller, both outputs of each pair used."""
        out = np.empty(count, dtype=np.float64)
        i = 0
        two_pi = 2.0 * math.pi
        while i < count:
            u1 = self.uniform_open0()
            u2 = self.uniform_open0()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(two_pi * u2)
            if i + 1 < count:
                out[i + 1] = r * math.sin(two_pi * u2)
            i += 2
        return out

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle, in place; returns ``items``."""
        for i in range(len(items) - 1, 0, -1):
            j = self.bounded(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

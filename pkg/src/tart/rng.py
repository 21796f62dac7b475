"""SplitMix64: a tiny, portable generator for reproducible augmentation draws.

Reference (Steele, Lea & Flood 2014; Vigna's C reference)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

All arithmetic is modulo 2**64.  ``uniform()`` maps the top 53 bits of the next
output to [0, 1).
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return low + (high - low) * u


def derive_seed(seed: int, *keys: int) -> int:
    """Mix integer keys into a seed, giving independent streams per (file, segment, ...)."""
    g = SplitMix64(seed)
    out = g.next_u64()
    for k in keys:
        g = SplitMix64(out ^ (k & MASK64))
        out = g.next_u64()
    return out

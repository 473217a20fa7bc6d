"""Deterministic seeding helpers built on the counter-based Philox generator."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def mix_seed(seed: int, *words: int) -> int:
    """Fold extra words into a base seed, splitmix64-style.

    Produces well-separated streams for (seed, sample index, purpose)
    tuples so that parallel workers and regeneration agree bit-for-bit.
    """
    x = seed & _MASK64
    for w in words:
        x = (x + 0x9E3779B97F4A7C15 + (w & _MASK64)) & _MASK64
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
        x ^= x >> 31
    return x


def philox(seed: int, *words: int) -> np.random.Generator:
    """Generator keyed by a mixed seed; same inputs give the same stream."""
    return np.random.Generator(np.random.Philox(key=mix_seed(seed, *words)))

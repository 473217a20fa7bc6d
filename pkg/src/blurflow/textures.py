"""Seeded procedural source textures standing in for real micrographs."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .rng import philox


def _normalize(img: np.ndarray, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    span = img.max() - img.min()
    if span <= 0:
        return np.full_like(img, 0.5 * (lo + hi))
    return lo + (hi - lo) * (img - img.min()) / span


def make_texture(shape: tuple[int, int], seed: int, kind: str = "mixed") -> np.ndarray:
    """Generate a broadband textured plane in [0.05, 0.95].

    kinds: "noise" is smoothed white noise over a slow background,
    "particles" scatters bright emitters on a dim field, "mixed" blends
    both.  All content is deterministic per (shape, seed, kind).
    """
    h, w = shape
    if h < 8 or w < 8:
        raise ValueError("texture shape must be at least 8x8")
    rng = philox(seed, 0x74657874)
    if kind == "noise":
        fine = ndimage.gaussian_filter(rng.uniform(size=shape), 0.8)
        coarse = ndimage.gaussian_filter(rng.uniform(size=shape), 6.0)
        return _normalize(fine + 1.5 * coarse)
    if kind == "particles":
        img = np.zeros(shape)
        count = max(12, (h * w) // 160)
        ys = rng.integers(0, h, count)
        xs = rng.integers(0, w, count)
        amps = rng.uniform(0.3, 1.0, count)
        img[ys, xs] = amps
        img = ndimage.gaussian_filter(img, 1.2)
        return _normalize(img, lo=0.02, hi=0.95)
    if kind == "mixed":
        a = make_texture(shape, seed * 2 + 1, "noise")
        b = make_texture(shape, seed * 2 + 2, "particles")
        return _normalize(0.55 * a + 0.45 * b)
    raise ValueError(f"unknown texture kind: {kind!r}")


def procedural_sources(
    seed: int, count: int, shape: tuple[int, int], kind: str = "mixed"
) -> list[np.ndarray]:
    """Deterministic pool of source textures for dataset building."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [make_texture(shape, seed + 7919 * i, kind) for i in range(count)]

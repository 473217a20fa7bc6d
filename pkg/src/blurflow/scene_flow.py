"""Scene partitions and piecewise-constant 3D velocity fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optics import MotionParams
from .rng import philox


@dataclass
class MaskSet:
    """Partition of an image plane into labelled regions.

    ``labels`` holds the region index per pixel; ``count`` regions exist
    and every pixel belongs to exactly one, so the boolean planes are
    pairwise disjoint and sum to the all-ones plane by construction.
    """

    labels: np.ndarray
    count: int

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("labels must be a 2-D integer array")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if lab.min() < 0 or lab.max() >= self.count:
            raise ValueError("labels out of range for count")
        self.labels = lab.astype(np.int32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def planes(self) -> np.ndarray:
        """Boolean stack (count, h, w), one plane per region."""
        return self.labels[None, :, :] == np.arange(self.count)[:, None, None]


@dataclass
class VelocityField:
    """Dense per-pixel motion maps: v1, v2, v3 and start depth z0."""

    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    z0: np.ndarray

    def __post_init__(self) -> None:
        shapes = {np.asarray(p).shape for p in (self.v1, self.v2, self.v3, self.z0)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError("all four planes must share one 2-D shape")
        for name in ("v1", "v2", "v3", "z0"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.v1.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.v1, self.v2, self.v3, self.z0])


def generate_masks(shape: tuple[int, int], n: int, seed: int) -> MaskSet:
    """Voronoi partition of ``shape`` from ``n`` seeded sites.

    Sites are drawn uniformly without replacement; each pixel joins the
    nearest site in Euclidean distance, ties to the lowest site index.
    """
    h, w = shape
    if h < 1 or w < 1:
        raise ValueError("shape must be positive")
    if not 1 <= n <= h * w:
        raise ValueError(f"need 1 <= n <= {h * w} regions, got {n}")
    rng = philox(seed, 0x6D61736B)
    flat = rng.choice(h * w, size=n, replace=False)
    sy, sx = np.divmod(flat, w)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[None] - sy[:, None, None]) ** 2 + (xx[None] - sx[:, None, None]) ** 2
    return MaskSet(labels=np.argmin(d2, axis=0).astype(np.int32), count=n)


def sample_motion_params(seed: int, count: int) -> list[MotionParams]:
    """Independent uniform draws: v1, v2 on [-1, 1]; v3, z0 on [0, 1]."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = philox(seed, 0x70617261)
    draws = rng.uniform(size=(count, 4))
    return [
        MotionParams(
            v1=2.0 * a - 1.0, v2=2.0 * b - 1.0, v3=float(c), z0=float(d)
        )
        for a, b, c, d in draws
    ]


def field_from_masks(masks: MaskSet, params: list[MotionParams]) -> VelocityField:
    """Paint region-constant motion parameters into dense maps."""
    if len(params) != masks.count:
        raise ValueError(
            f"got {len(params)} parameter sets for {masks.count} regions"
        )
    table = np.array([p.as_tuple() for p in params], dtype=np.float64)
    v1, v2, v3, z0 = table[masks.labels].transpose(2, 0, 1)
    return VelocityField(v1=v1, v2=v2, v3=v3, z0=z0)


def cylinder_flow_field(shape: tuple[int, int], v_max: float) -> VelocityField:
    """Laminar-rotation profile over image rows.

    With row fraction y running 0 at the bottom row to 1 at the top,
    v2 = v_max cos(y pi/2) and v3 = v_max sin(y pi/2): purely lateral
    flow at the bottom turning purely axial at the top.  v1 and z0 are
    zero.
    """
    h, w = shape
    if h < 2 or w < 1:
        raise ValueError("shape must be at least 2 rows by 1 column")
    if not 0.0 <= v_max <= 1.0:
        raise ValueError("v_max must lie in [0, 1]")
    y = (h - 1 - np.arange(h, dtype=np.float64)) / (h - 1)
    v2 = v_max * np.cos(y * np.pi / 2.0)
    v3 = v_max * np.sin(y * np.pi / 2.0)
    zeros = np.zeros(shape)
    return VelocityField(
        v1=zeros.copy(),
        v2=np.repeat(v2[:, None], w, axis=1),
        v3=np.repeat(v3[:, None], w, axis=1),
        z0=zeros.copy(),
    )


def quantize_field_rows(field: VelocityField, n_bands: int) -> tuple[MaskSet, list[MotionParams]]:
    """Split a field into horizontal bands with band-center parameters.

    Convenience for synthesizing row-structured flows (the cylinder
    profile) through the region-based imaging path.  Bands are as equal
    in height as divisibility allows; parameters are read at each band's
    central row and clipped to the valid motion ranges.
    """
    h, w = field.shape
    if not 1 <= n_bands <= h:
        raise ValueError(f"need 1 <= n_bands <= {h}, got {n_bands}")
    edges = np.linspace(0, h, n_bands + 1).astype(int)
    labels = np.zeros((h, w), dtype=np.int32)
    params = []
    for i in range(n_bands):
        rows = slice(edges[i], edges[i + 1])
        labels[rows] = i
        r = (edges[i] + edges[i + 1] - 1) // 2
        params.append(
            MotionParams(
                v1=float(np.clip(field.v1[r].mean(), -1.0, 1.0)),
                v2=float(np.clip(field.v2[r].mean(), -1.0, 1.0)),
                v3=float(np.clip(field.v3[r].mean(), 0.0, 1.0)),
                z0=float(np.clip(field.z0[r].mean(), 0.0, 1.0)),
            )
        )
    return MaskSet(labels=labels, count=n_bands), params

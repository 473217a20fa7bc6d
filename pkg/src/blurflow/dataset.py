"""Dataset assembly, target containers, the on-disk manifest, and the loss.

A dataset is a directory of (blurred PGM, target BFLW) pairs plus a
`manifest.json` whose header fields fully determine every byte of the
procedurally-sourced sample files, so a dataset can be regenerated and
verified from the manifest alone.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import apply_noise, form_image, validity_map
from .io import read_bflw, write_bflw, write_pgm
from .optics import ConfigurationError, MotionParams, OpticsConfig
from .rng import mix_seed
from .scene_flow import VelocityField, field_from_masks, generate_masks, sample_motion_params
from .textures import procedural_sources

MANIFEST_NAME = "manifest.json"
_IMG_PATTERN = "img_%06u.pgm"
_TGT_PATTERN = "tgt_%06u.bflw"


@dataclass
class TargetMaps:
    """Dense supervision targets: motion planes plus the validity plane w.

    w is binary: 0 marks textured pixels where regression supervision is
    active, 1 marks uninformative pixels.
    """

    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    z0: np.ndarray
    w: np.ndarray

    CHANNELS = ("v1", "v2", "v3", "z0", "w")

    def __post_init__(self) -> None:
        shapes = {np.asarray(getattr(self, c)).shape for c in self.CHANNELS}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError("all five planes must share one 2-D shape")
        for c in self.CHANNELS:
            setattr(self, c, np.asarray(getattr(self, c), dtype=np.float64))
        if not np.isin(self.w, (0.0, 1.0)).all():
            raise ValueError("w must be binary (0 or 1)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.v1.shape

    def stack(self) -> np.ndarray:
        return np.stack([getattr(self, c) for c in self.CHANNELS])

    @classmethod
    def from_stack(cls, planes: np.ndarray) -> "TargetMaps":
        if planes.ndim != 3 or planes.shape[0] != 5:
            raise ValueError(f"expected (5, h, w), got {planes.shape}")
        return cls(*planes)

    @classmethod
    def from_field(cls, field_: VelocityField, w: np.ndarray) -> "TargetMaps":
        return cls(v1=field_.v1, v2=field_.v2, v3=field_.v3, z0=field_.z0, w=w)

    def save(self, path: str | Path, seed: int = 0) -> None:
        write_bflw(path, self.stack().astype(np.float32), seed)

    @classmethod
    def load(cls, path: str | Path) -> tuple["TargetMaps", int]:
        planes, seed = read_bflw(path)
        if planes.shape[0] != 5:
            raise ValueError(
                f"target file has {planes.shape[0]} channels, expected 5: {path}"
            )
        return cls.from_stack(planes), seed


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0
    u_components: int = 3

    def __post_init__(self) -> None:
        if not math.isfinite(self.gamma) or self.gamma < 0.0:
            raise ValueError("gamma must be finite and >= 0")
        if self.u_components != 3:
            raise ValueError("u_components is fixed at 3")


def loss(pred: TargetMaps, target: TargetMaps, cfg: LossConfig | None = None) -> float:
    """Masked regression objective, averaged over pixels.

    Per pixel: gamma*(w - w~)^2 + (1 - w)/(U + 1) * [sum_u (|v_u| - |v~_u|)^2
    + (z0 - z~0)^2], where w is the target validity and U = 3.  Absolute
    values make the lateral terms insensitive to sign flips.
    """
    cfg = cfg or LossConfig()
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} vs target {target.shape} shape mismatch")
    validity = cfg.gamma * (target.w - pred.w) ** 2
    reg = (target.z0 - pred.z0) ** 2
    for c in ("v1", "v2", "v3"):
        reg += (np.abs(getattr(target, c)) - np.abs(getattr(pred, c))) ** 2
    per_pixel = validity + (1.0 - target.w) / (cfg.u_components + 1.0) * reg
    return float(per_pixel.mean())


def to_cylindrical(v1, v2):
    """Cartesian lateral pair to (rho, theta); theta is 0 on the axis rho = 0."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    rho = np.hypot(v1, v2)
    theta = np.arctan2(v2, v1)
    theta = np.where(rho == 0.0, 0.0, theta)
    theta = np.where(theta == -np.pi, np.pi, theta)
    if rho.ndim == 0:
        return float(rho), float(theta)
    return rho, theta


@dataclass(frozen=True)
class DatasetRequest:
    """Header fields that, with the source pool, determine a dataset."""

    out_dir: str
    seed: int
    k: int
    image_shape: tuple[int, int]
    n_masks: int = 3
    optics: OpticsConfig = field(default_factory=OpticsConfig)
    photon_scale: float = 1000.0
    validity_window: int = 15
    validity_tau: float = 2.0
    jobs: int = 1

    def __post_init__(self) -> None:
        problems = []
        if self.k < 1:
            problems.append("k must be >= 1")
        if len(self.image_shape) != 2 or min(self.image_shape) < 8:
            problems.append("image_shape must be (h, w) with both >= 8")
        if self.n_masks < 1:
            problems.append("n_masks must be >= 1")
        if self.photon_scale <= 0:
            problems.append("photon_scale must be positive")
        if self.validity_window < 3 or self.validity_window % 2 == 0:
            problems.append("validity_window must be odd and >= 3")
        if self.jobs < 1:
            problems.append("jobs must be >= 1")
        if problems:
            raise ConfigurationError(
                "invalid DatasetRequest:\n" + "\n".join("  - " + p for p in problems)
            )


@dataclass
class DatasetManifest:
    version: int
    seed: int
    k: int
    image_shape: tuple[int, int]
    n_masks: int
    optics: OpticsConfig
    photon_scale: float
    validity_window: int
    validity_tau: float
    source_kind: str  # "procedural" or "external"
    n_sources: int
    samples: list[dict]

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "seed": self.seed,
            "k": self.k,
            "image_shape": list(self.image_shape),
            "n_masks": self.n_masks,
            "optics": json.loads(self.optics.to_json()),
            "photon_scale": self.photon_scale,
            "validity_window": self.validity_window,
            "validity_tau": self.validity_tau,
            "source_kind": self.source_kind,
            "n_sources": self.n_sources,
            "samples": self.samples,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(
            version=doc["version"],
            seed=doc["seed"],
            k=doc["k"],
            image_shape=tuple(doc["image_shape"]),
            n_masks=doc["n_masks"],
            optics=OpticsConfig.from_json(json.dumps(doc["optics"])),
            photon_scale=doc["photon_scale"],
            validity_window=doc["validity_window"],
            validity_tau=doc["validity_tau"],
            source_kind=doc["source_kind"],
            n_sources=doc["n_sources"],
            samples=doc["samples"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def sample_seed(global_seed: int, index: int) -> int:
    """Per-sample stream key; mixing keeps parallel workers order-free."""
    return mix_seed(global_seed, index)


def enumerate_region_params(seed: int, k: int, n_masks: int) -> list[list[MotionParams]]:
    """Exactly the per-region draws build_dataset uses, without synthesis."""
    return [sample_motion_params(sample_seed(seed, i), n_masks) for i in range(k)]


def _center_crop(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    top = (img.shape[0] - h) // 2
    left = (img.shape[1] - w) // 2
    return img[top : top + h, left : left + w]


def _build_sample(
    index: int, source: np.ndarray, req: DatasetRequest
) -> tuple[str, str, list[MotionParams], int]:
    seed_i = sample_seed(req.seed, index)
    crop = _center_crop(source, req.image_shape)
    masks = generate_masks(req.image_shape, req.n_masks, seed_i)
    params = sample_motion_params(seed_i, req.n_masks)
    blurred = form_image(crop, masks, params, req.optics)
    noisy = apply_noise(blurred, req.optics, req.photon_scale, seed_i)
    w = validity_map(crop, req.validity_window, req.validity_tau)
    targets = TargetMaps.from_field(field_from_masks(masks, params), w)
    img_name = _IMG_PATTERN % index
    tgt_name = _TGT_PATTERN % index
    out = Path(req.out_dir)
    write_pgm(out / img_name, noisy)
    targets.save(out / tgt_name, seed_i)
    return img_name, tgt_name, params, seed_i


def _build_sample_star(args) -> tuple[str, str, list[MotionParams], int]:
    return _build_sample(*args)


def build_dataset(
    source_images: list[np.ndarray],
    request: DatasetRequest,
    source_kind: str = "external",
    n_sources: int | None = None,
) -> DatasetManifest:
    """Synthesize k labeled samples and write them plus a manifest.

    Sample i draws its texture from ``source_images[i % len(...)]``
    (center-cropped), partitions it, samples per-region motion, forms
    the blurred frame, adds sensor noise, and computes validity from the
    sharp crop.  Every random draw is keyed on hash(seed, i), so output
    bytes are independent of worker count and generation order.
    """
    if not source_images:
        raise ConfigurationError("no source images provided")
    for i, src in enumerate(source_images):
        if src.shape[0] < request.image_shape[0] or src.shape[1] < request.image_shape[1]:
            raise ConfigurationError(
                f"source image {i} of shape {src.shape} is smaller than "
                f"requested {request.image_shape}"
            )
    out = Path(request.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    tasks = [
        (i, source_images[i % len(source_images)], request) for i in range(request.k)
    ]
    if request.jobs > 1:
        workers = min(request.jobs, os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_build_sample_star, tasks, chunksize=4))
    else:
        results = [_build_sample(*t) for t in tasks]

    samples = [
        {
            "image": img,
            "targets": tgt,
            "sample_seed": seed_i,
            "regions": [
                {"v1": p.v1, "v2": p.v2, "v3": p.v3, "z0": p.z0} for p in params
            ],
        }
        for img, tgt, params, seed_i in results
    ]
    manifest = DatasetManifest(
        version=1,
        seed=request.seed,
        k=request.k,
        image_shape=request.image_shape,
        n_masks=request.n_masks,
        optics=request.optics,
        photon_scale=request.photon_scale,
        validity_window=request.validity_window,
        validity_tau=request.validity_tau,
        source_kind=source_kind,
        n_sources=n_sources if n_sources is not None else len(source_images),
        samples=samples,
    )
    (out / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest


def build_dataset_procedural(request: DatasetRequest, n_sources: int = 8) -> DatasetManifest:
    """Dataset whose sources derive from the seed: regenerable from the header."""
    margin = 16
    shape = (request.image_shape[0] + margin, request.image_shape[1] + margin)
    n = min(n_sources, request.k)
    sources = procedural_sources(request.seed, n, shape)
    return build_dataset(sources, request, source_kind="procedural", n_sources=n)


def rebuild_from_manifest(manifest: DatasetManifest, out_dir: str | Path) -> DatasetManifest:
    """Regenerate a procedural dataset from its manifest header fields."""
    if manifest.source_kind != "procedural":
        raise ConfigurationError(
            "only procedurally-sourced datasets can be rebuilt from the header; "
            "externally-sourced datasets need the original images"
        )
    request = DatasetRequest(
        out_dir=str(out_dir),
        seed=manifest.seed,
        k=manifest.k,
        image_shape=manifest.image_shape,
        n_masks=manifest.n_masks,
        optics=manifest.optics,
        photon_scale=manifest.photon_scale,
        validity_window=manifest.validity_window,
        validity_tau=manifest.validity_tau,
    )
    return build_dataset_procedural(request, n_sources=manifest.n_sources)

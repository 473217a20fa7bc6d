"""Forward imaging: spatially-variant blur synthesis, sensor noise, validity.

A scene is a sharp intensity plane plus a partition into regions that
each move rigidly during the exposure.  The blurred frame is the sum of
the per-region convolutions: each masked slice of the sharp image is
convolved with that region's exposure-integrated kernel.  Convolutions
are linear with zero padding, never circular, so blur cannot wrap
across the frame.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage, signal

from .optics import Kernel2D, MotionParams, OpticsConfig, motion_psf
from .rng import mix_seed
from .scene_flow import MaskSet


def _check_plane(image: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {img.shape}")
    if not np.isfinite(img).all() or img.min() < 0.0:
        raise ValueError(f"{name} must be finite and non-negative")
    return img


def form_image(
    sharp: np.ndarray,
    masks: MaskSet,
    params: list[MotionParams],
    optics: OpticsConfig,
    kernels: list[Kernel2D] | None = None,
) -> np.ndarray:
    """Blur each region with its own motion kernel and sum.

    ``kernels`` may carry precomputed kernels matching ``params`` to skip
    the model evaluation (callers doing repeated synthesis).  Negative
    ringing from the FFT path is clamped to zero.
    """
    img = _check_plane(sharp, "sharp")
    if img.shape != masks.shape:
        raise ValueError(f"sharp {img.shape} vs masks {masks.shape} shape mismatch")
    if len(params) != masks.count:
        raise ValueError(f"{len(params)} params for {masks.count} regions")
    if kernels is None:
        kernels = [motion_psf(optics, p) for p in params]
    elif len(kernels) != masks.count:
        raise ValueError("kernels length must match region count")
    out = np.zeros_like(img)
    planes = masks.planes()
    for plane, ker in zip(planes, kernels):
        # fftconvolve zero-pads to image + kernel - 1 and crops back.
        out += signal.fftconvolve(img * plane, ker.weights, mode="same")
    return np.clip(out, 0.0, None)


def form_image_direct(
    sharp: np.ndarray,
    masks: MaskSet,
    params: list[MotionParams],
    optics: OpticsConfig,
    kernels: list[Kernel2D] | None = None,
) -> np.ndarray:
    """Spatial-domain oracle for :func:`form_image`.

    Same per-region sum, but each convolution is evaluated directly in
    the spatial domain with explicit zero boundaries.  Quadratic cost;
    only suitable for small frames and verification.
    """
    img = _check_plane(sharp, "sharp")
    if img.shape != masks.shape:
        raise ValueError(f"sharp {img.shape} vs masks {masks.shape} shape mismatch")
    if len(params) != masks.count:
        raise ValueError(f"{len(params)} params for {masks.count} regions")
    if kernels is None:
        kernels = [motion_psf(optics, p) for p in params]
    out = np.zeros_like(img)
    for plane, ker in zip(masks.planes(), kernels):
        out += ndimage.convolve(img * plane, ker.weights, mode="constant", cval=0.0)
    return np.clip(out, 0.0, None)


def apply_noise(
    clean: np.ndarray, optics: OpticsConfig, photon_scale: float, seed: int
) -> np.ndarray:
    """Shot noise plus stray-light background.

    out = beta * Poisson(photon_scale * clean) / photon_scale + |N(0, sigma^2)|
    drawn from a counter-based stream keyed on the seed, so results are
    bit-identical per seed regardless of platform or tiling.
    """
    img = _check_plane(clean, "clean")
    if photon_scale <= 0.0:
        raise ValueError("photon_scale must be positive")
    rng = np.random.Generator(np.random.Philox(key=mix_seed(seed, 0x6E6F6973)))
    photons = rng.poisson(photon_scale * img).astype(np.float64)
    background = np.abs(rng.normal(0.0, optics.gaussian_sigma, size=img.shape))
    return optics.quantum_efficiency_beta * photons / photon_scale + background


def validity_map(image: np.ndarray, window: int = 15, tau: float = 2.0) -> np.ndarray:
    """Flag featureless pixels: 1 where texture is too weak to carry blur cues.

    A pixel is valid (0) when the local standard deviation over the
    window exceeds ``tau`` times a global activity floor, taken as a
    twentieth of the 95th-percentile local deviation over the frame
    interior.  Tying the floor to the frame's own activity keeps the map
    invariant under affine intensity rescaling and keeps high-contrast
    texture valid regardless of its spatial frequency.  Pixels whose
    window leaves the frame are always invalid.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    if tau < 0.0:
        raise ValueError("tau must be >= 0")
    mean = ndimage.uniform_filter(img, size=window)
    mean_sq = ndimage.uniform_filter(img * img, size=window)
    local_std = np.sqrt(np.clip(mean_sq - mean * mean, 0.0, None))
    w = np.ones(img.shape, dtype=np.float64)
    half = window // 2
    interior = (slice(half, img.shape[0] - half), slice(half, img.shape[1] - half))
    if img.shape[0] > 2 * half and img.shape[1] > 2 * half:
        scale = 0.05 * np.percentile(local_std[interior], 95.0)
        w[interior] = np.where(local_std[interior] > tau * scale, 0.0, 1.0)
    return w

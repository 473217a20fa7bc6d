"""Scalar-diffraction optical model for wide-field fluorescence imaging.

The point-spread function is computed from a circular pupil of unit
amplitude whose phase carries a single defocus term (Noll index 4).
Depth is dimensionless: a depth ``z`` contributes the pupil phase
``dof_scale * z * Z4(rho)``.  Lateral motion enters as a sub-pixel
Fourier phase ramp applied to the instantaneous intensity PSF, and an
exposure is modelled by averaging ``time_steps`` instantaneous PSFs at
midpoint times, so a moving emitter produces a streaked kernel whose
centroid sits at half the lateral sweep.

All kernels are returned at unit sum on an odd square grid.  Pupil
fields live on a padded grid of ``pad_factor * kernel_size_px`` samples
so that circular FFT wrap-around stays out of the cropped window; the
pad also provides the headroom that a moving kernel sweeps through.

Frequency sampling: the pupil radius in the discrete frequency plane is
``numerical_aperture * pixel_pitch_um / wavelength_um`` cycles per
pixel.  Intensity spectra have twice that support, so values above 0.25
alias on the pixel grid and are rejected at configuration time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from functools import lru_cache

import numpy as np


class ConfigurationError(ValueError):
    """Raised when a configuration is internally inconsistent or out of range."""


# Calibrated so that a unit depth offset doubles the second moment of the
# in-focus PSF under the default geometry below.
_DOF_SCALE_DEFAULT = 1.0888387865222122


@dataclass(frozen=True)
class OpticsConfig:
    """Immutable description of the imaging system and kernel grid.

    Defaults satisfy the band limit ``NA * pitch / wavelength <= 0.25``
    exactly, which keeps the sampled intensity spectrum alias-free and
    makes the sub-pixel shift of a kernel exact rather than approximate.
    """

    numerical_aperture: float = 0.3
    wavelength_um: float = 0.6
    pixel_pitch_um: float = 0.5
    kernel_size_px: int = 45
    pad_factor: int = 3
    exposure_dt: float = 1.0
    blur_scale_px: float = 8.0
    dof_scale: float = _DOF_SCALE_DEFAULT
    time_steps: int = 32
    quantum_efficiency_beta: float = 0.9
    gaussian_sigma: float = 0.02

    def __post_init__(self) -> None:
        problems = []
        if not 0.0 < self.numerical_aperture <= 1.5:
            problems.append("numerical_aperture must lie in (0, 1.5]")
        if self.wavelength_um <= 0.0:
            problems.append("wavelength_um must be positive")
        if self.pixel_pitch_um <= 0.0:
            problems.append("pixel_pitch_um must be positive")
        if self.kernel_size_px < 3 or self.kernel_size_px % 2 == 0:
            problems.append("kernel_size_px must be odd and >= 3")
        if self.pad_factor < 2:
            problems.append("pad_factor must be >= 2")
        if self.exposure_dt <= 0.0:
            problems.append("exposure_dt must be positive")
        if self.blur_scale_px <= 0.0:
            problems.append("blur_scale_px must be positive")
        if self.dof_scale <= 0.0:
            problems.append("dof_scale must be positive")
        if self.time_steps < 2:
            problems.append("time_steps must be >= 2")
        if not 0.0 < self.quantum_efficiency_beta <= 1.0:
            problems.append("quantum_efficiency_beta must lie in (0, 1]")
        if self.gaussian_sigma < 0.0:
            problems.append("gaussian_sigma must be >= 0")
        if problems:
            raise ConfigurationError(
                "invalid OpticsConfig:\n" + "\n".join("  - " + p for p in problems)
            )
        # Intensity spectra span 2*NA*pitch/lambda cycles/px; past 0.25 the
        # sampled kernel aliases and phase-ramp shifts silently go wrong.
        if self.frequency_cutoff > 0.25 + 1e-12:
            raise ConfigurationError(
                "NA * pixel_pitch_um / wavelength_um = "
                f"{self.frequency_cutoff:.4f} exceeds 0.25; the intensity "
                "spectrum would alias on the pixel grid"
            )

    @property
    def frequency_cutoff(self) -> float:
        """Pupil radius in cycles per pixel."""
        return self.numerical_aperture * self.pixel_pitch_um / self.wavelength_um

    @property
    def grid_size(self) -> int:
        return self.pad_factor * self.kernel_size_px

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)})

    @classmethod
    def from_json(cls, text: str) -> "OpticsConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("optics JSON must be an object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown optics fields: {', '.join(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class MotionParams:
    """Per-region motion state: lateral velocities, axial velocity, start depth.

    Lateral components are signed and bounded by 1 in magnitude; the
    axial velocity and start depth are non-negative and bounded by 1.
    """

    v1: float = 0.0
    v2: float = 0.0
    v3: float = 0.0
    z0: float = 0.0

    def __post_init__(self) -> None:
        problems = []
        for name in ("v1", "v2"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [-1, 1]")
        for name in ("v3", "z0"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        for name in ("v1", "v2", "v3", "z0"):
            if not math.isfinite(getattr(self, name)):
                problems.append(f"{name} must be finite")
        if problems:
            raise ValueError(
                "invalid MotionParams:\n" + "\n".join("  - " + p for p in problems)
            )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.v1, self.v2, self.v3, self.z0)

    @property
    def lateral_speed(self) -> float:
        return math.hypot(self.v1, self.v2)


@dataclass
class Kernel2D:
    """Odd-sized square blur kernel with non-negative unit-sum weights.

    ``valid`` is True for kernels produced by the forward model; estimators
    set it False on placeholder kernels returned for inputs that carry no
    usable signal (for example a textureless deconvolution patch).
    """

    weights: np.ndarray
    valid: bool = True

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be odd square, got shape {w.shape}")
        if np.any(w < 0) or not np.isfinite(w).all():
            raise ValueError("kernel weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-8:
            raise ValueError(f"kernel weights must sum to 1, got {w.sum():.10f}")
        self.weights = w

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def centroid(self) -> tuple[float, float]:
        """(x, y) first moment in pixels relative to the central tap."""
        c = self.size // 2
        idx = np.arange(self.size, dtype=np.float64) - c
        cx = float((self.weights.sum(axis=0) * idx).sum())
        cy = float((self.weights.sum(axis=1) * idx).sum())
        return cx, cy

    def second_moment(self) -> float:
        """Trace of the central second-moment matrix, px^2."""
        c = self.size // 2
        idx = np.arange(self.size, dtype=np.float64) - c
        xx, yy = np.meshgrid(idx, idx)
        cx, cy = self.centroid()
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return float((self.weights * r2).sum())

    def mirrored_lr(self) -> "Kernel2D":
        return Kernel2D(self.weights[:, ::-1].copy())


def noll_to_nm(j: int) -> tuple[int, int]:
    """Convert a Noll index (1-based) to the radial/azimuthal pair (n, m)."""
    if j < 1:
        raise ValueError(f"Noll index must be >= 1, got {j}")
    n = 0
    while (n + 1) * (n + 2) // 2 < j:
        n += 1
    k = j - n * (n + 1) // 2 - 1  # rank within the order, 0-based
    if n % 2 == 0:
        m_abs = 2 * ((k + 1) // 2)
    else:
        m_abs = 2 * (k // 2) + 1
    # Noll: even j takes the cosine (m >= 0) term, odd j the sine term.
    m = m_abs if j % 2 == 0 else -m_abs
    if m_abs == 0:
        m = 0
    return n, m


def _radial_poly(n: int, m_abs: int, rho: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rho, dtype=np.float64)
    for s in range((n - m_abs) // 2 + 1):
        coeff = (
            (-1.0) ** s
            * math.factorial(n - s)
            / (
                math.factorial(s)
                * math.factorial((n + m_abs) // 2 - s)
                * math.factorial((n - m_abs) // 2 - s)
            )
        )
        out += coeff * rho ** (n - 2 * s)
    return out


def zernike_eval(j: int, rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Evaluate the Noll-normalized Zernike polynomial Z_j on (rho, phi).

    Uses the orthonormal convention: sqrt(n+1) for m = 0 terms and
    sqrt(2(n+1)) with cos/sin for m != 0.  Values outside rho <= 1 are
    returned as computed; callers mask to the pupil themselves.
    """
    rho = np.asarray(rho, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    n, m = noll_to_nm(j)
    rad = _radial_poly(n, abs(m), rho)
    if m == 0:
        return math.sqrt(n + 1.0) * rad
    if m > 0:
        return math.sqrt(2.0 * (n + 1.0)) * rad * np.cos(m * phi)
    return math.sqrt(2.0 * (n + 1.0)) * rad * np.sin(-m * phi)


class _Geometry:
    """Cached frequency-plane arrays shared by every kernel evaluation."""

    def __init__(self, grid_size: int, cutoff: float) -> None:
        self.grid_size = grid_size
        self.freq = np.fft.fftfreq(grid_size)  # cycles per pixel, DC first
        fx, fy = np.meshgrid(self.freq, self.freq, indexing="xy")
        rho = np.hypot(fx, fy) / cutoff
        phi = np.arctan2(fy, fx)
        self.pupil = rho <= 1.0
        self.defocus = np.where(self.pupil, zernike_eval(4, rho, phi), 0.0)
        self.pupil_area = int(self.pupil.sum())


@lru_cache(maxsize=16)
def _geometry(grid_size: int, cutoff: float) -> _Geometry:
    return _Geometry(grid_size, cutoff)


def _instantaneous_psfs(optics: OpticsConfig, depths: np.ndarray) -> np.ndarray:
    """Intensity PSFs at the given depths, DC-origin layout, shape (n, M, M)."""
    geo = _geometry(optics.grid_size, optics.frequency_cutoff)
    phase = optics.dof_scale * depths[:, None, None] * geo.defocus[None, :, :]
    pupil_field = np.where(geo.pupil[None, :, :], np.exp(1j * phase), 0.0)
    amplitude = np.fft.ifft2(pupil_field, axes=(-2, -1))
    psf = np.abs(amplitude) ** 2
    return psf / psf.sum(axis=(-2, -1), keepdims=True)


def _crop_center(plane: np.ndarray, size: int) -> np.ndarray:
    c = plane.shape[-1] // 2
    h = size // 2
    return plane[..., c - h : c + h + 1, c - h : c + h + 1]


def _finalize(plane: np.ndarray, size: int) -> Kernel2D:
    ker = _crop_center(plane, size)
    ker = np.clip(ker, 0.0, None)
    total = ker.sum()
    if total <= 0.0:
        raise ValueError("kernel energy vanished inside the crop window")
    return Kernel2D(ker / total)


@lru_cache(maxsize=16)
def _containment_size(grid_size: int, cutoff: float) -> int:
    """Smallest odd window holding 99% of the in-focus PSF squared energy."""
    geo = _geometry(grid_size, cutoff)
    field = np.where(geo.pupil, 1.0 + 0.0j, 0.0)
    psf = np.abs(np.fft.ifft2(field)) ** 2
    psf = np.fft.fftshift(psf)
    energy = psf**2
    total = energy.sum()
    for size in range(3, grid_size + 1, 2):
        if _crop_center(energy, size).sum() >= 0.99 * total:
            return size
    return grid_size


def _check_containment(optics: OpticsConfig) -> None:
    need = _containment_size(optics.grid_size, optics.frequency_cutoff)
    if optics.kernel_size_px < need:
        raise ConfigurationError(
            f"kernel_size_px={optics.kernel_size_px} cannot hold 99% of the "
            f"in-focus PSF energy; use at least {need}"
        )


def static_psf(optics: OpticsConfig, z: float) -> Kernel2D:
    """Instantaneous defocused PSF at dimensionless depth ``z``.

    The kernel broadens monotonically with ``|z|`` and is identical for
    ``+z`` and ``-z``: a phase-only pupil with an even aberration gives a
    point-symmetric intensity.
    """
    if not math.isfinite(z):
        raise ValueError("depth must be finite")
    _check_containment(optics)
    psf = _instantaneous_psfs(optics, np.asarray([float(z)]))[0]
    return _finalize(np.fft.fftshift(psf), optics.kernel_size_px)


def _midpoint_times(time_steps: int, exposure_dt: float) -> np.ndarray:
    return (np.arange(time_steps, dtype=np.float64) + 0.5) / time_steps * exposure_dt


def _required_kernel_size(optics: OpticsConfig, sweep_px: float) -> int:
    need = int(math.ceil(2.0 * sweep_px / (optics.pad_factor - 1)))
    need = max(need + 1 if need % 2 == 0 else need, 3)
    return need


def motion_psf(
    optics: OpticsConfig, motion: MotionParams, time_steps: int | None = None
) -> Kernel2D:
    """Exposure-integrated blur kernel for one rigid motion state.

    Averages ``time_steps`` instantaneous PSFs sampled at midpoint times
    over the exposure.  At time ``t`` the emitter sits at depth
    ``z0 + v3 * t`` and has swept ``(v1, v2) * blur_scale_px * t`` pixels
    laterally, applied as an exact Fourier phase ramp.  Negative values
    from floating-point round-off are clamped before renormalizing.

    ``time_steps`` overrides the configured sample count (used by search
    code that trades accuracy for speed); the default honors the config.
    """
    _check_containment(optics)
    T = optics.time_steps if time_steps is None else int(time_steps)
    if T < 2:
        raise ValueError("time_steps must be >= 2")
    sweep = (
        max(abs(motion.v1), abs(motion.v2))
        * optics.blur_scale_px
        * optics.exposure_dt
    )
    margin = (optics.grid_size - optics.kernel_size_px) / 2.0
    if sweep > margin:
        raise ConfigurationError(
            f"lateral sweep of {sweep:.1f} px leaves the padded grid; "
            f"kernel_size_px must be at least "
            f"{_required_kernel_size(optics, sweep)} at this pad_factor"
        )
    geo = _geometry(optics.grid_size, optics.frequency_cutoff)
    ts = _midpoint_times(T, optics.exposure_dt)
    depths = motion.z0 + motion.v3 * ts
    spectra = np.fft.fft2(_instantaneous_psfs(optics, depths), axes=(-2, -1))
    shift_x = motion.v1 * optics.blur_scale_px * ts
    shift_y = motion.v2 * optics.blur_scale_px * ts
    ramp_x = np.exp(-2j * np.pi * np.outer(shift_x, geo.freq))[:, None, :]
    ramp_y = np.exp(-2j * np.pi * np.outer(shift_y, geo.freq))[:, :, None]
    accum = (spectra * ramp_x * ramp_y).mean(axis=0)
    plane = np.fft.fftshift(np.fft.ifft2(accum).real)
    return _finalize(plane, optics.kernel_size_px)


def motion_psf_batch(
    optics: OpticsConfig,
    params: list[MotionParams],
    time_steps: int | None = None,
) -> list[Kernel2D]:
    """Kernels for many motion states, sharing defocus work per (v3, z0).

    Equivalent to calling :func:`motion_psf` per element; grouped so the
    depth-dependent pupil transforms are computed once for every distinct
    (v3, z0) pair, which dominates the cost during grid searches.
    """
    _check_containment(optics)
    T = optics.time_steps if time_steps is None else int(time_steps)
    geo = _geometry(optics.grid_size, optics.frequency_cutoff)
    ts = _midpoint_times(T, optics.exposure_dt)
    margin = (optics.grid_size - optics.kernel_size_px) / 2.0

    groups: dict[tuple[float, float], list[int]] = {}
    for i, p in enumerate(params):
        sweep = max(abs(p.v1), abs(p.v2)) * optics.blur_scale_px * optics.exposure_dt
        if sweep > margin:
            raise ConfigurationError(
                f"lateral sweep of {sweep:.1f} px leaves the padded grid; "
                f"kernel_size_px must be at least "
                f"{_required_kernel_size(optics, sweep)} at this pad_factor"
            )
        groups.setdefault((p.v3, p.z0), []).append(i)

    out: list[Kernel2D | None] = [None] * len(params)
    for (v3, z0), idxs in groups.items():
        depths = z0 + v3 * ts
        spectra = np.fft.fft2(_instantaneous_psfs(optics, depths), axes=(-2, -1))
        for i in idxs:
            p = params[i]
            sx = p.v1 * optics.blur_scale_px * ts
            sy = p.v2 * optics.blur_scale_px * ts
            ramp_x = np.exp(-2j * np.pi * np.outer(sx, geo.freq))[:, None, :]
            ramp_y = np.exp(-2j * np.pi * np.outer(sy, geo.freq))[:, :, None]
            accum = (spectra * ramp_x * ramp_y).mean(axis=0)
            plane = np.fft.fftshift(np.fft.ifft2(accum).real)
            out[i] = _finalize(plane, optics.kernel_size_px)
    return out  # type: ignore[return-value]


def calibrate_dof_scale(
    optics: OpticsConfig, target_ratio: float = 2.0, tol: float = 1e-10
) -> float:
    """Find dof_scale so static_psf at z=1 has ``target_ratio`` times the
    second moment of the in-focus PSF.  Bisection on a bracketed interval."""

    def ratio(d: float) -> float:
        cfg = replace(optics, dof_scale=d)
        return static_psf(cfg, 1.0).second_moment() / static_psf(
            cfg, 0.0
        ).second_moment()

    lo, hi = 1e-3, 1.0
    while ratio(hi) < target_ratio:
        hi *= 2.0
        if hi > 64.0:
            raise ValueError("failed to bracket the target moment ratio")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if hi - lo < tol:
            break
        if ratio(mid) < target_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)

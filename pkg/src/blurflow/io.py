"""File formats: 16-bit PGM / 8-bit PPM images and planar float32 target maps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_BFLW_MAGIC = b"BFLW"
_BFLW_HEADER = struct.Struct("<4sHHIIQ")  # magic, version, channels, h, w, seed
BFLW_VERSION = 1


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write intensities in [0,1] as binary 16-bit big-endian PGM (maxval 65535).

    Values are clipped to [0,1] then scaled with round-half-up.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    scaled = np.floor(np.clip(img, 0.0, 1.0) * 65535.0 + 0.5).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(scaled.tobytes())


def _read_header_tokens(fh, count: int) -> list[bytes]:
    # PGM headers are whitespace-delimited with '#' comments to end of line.
    tokens: list[bytes] = []
    while len(tokens) < count:
        ch = fh.read(1)
        if not ch:
            raise ValueError("truncated PGM header")
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = fh.read(1)
            continue
        tok = ch
        while True:
            ch = fh.read(1)
            if not ch or ch in b" \t\r\n":
                break
            tok += ch
        tokens.append(tok)
    return tokens


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5) into float64 intensities in [0,1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P5":
            raise ValueError(f"not a binary PGM (P5) file: {path}")
        w, h, maxval = (int(t) for t in _read_header_tokens(fh, 3))
        if not 0 < maxval < 65536:
            raise ValueError(f"bad maxval {maxval} in {path}")
        dtype = ">u2" if maxval > 255 else np.uint8
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size < h * w:
        raise ValueError(f"truncated pixel data in {path}")
    return data[: h * w].reshape(h, w).astype(np.float64) / maxval


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Write an (h, w, 3) uint8 array as binary PPM (P6)."""
    img = np.asarray(rgb)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected an (h, w, 3) uint8 array")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(2) != b"P6":
            raise ValueError(f"not a binary PPM (P6) file: {path}")
        w, h, maxval = (int(t) for t in _read_header_tokens(fh, 3))
        if maxval != 255:
            raise ValueError(f"unsupported PPM maxval {maxval}")
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size < h * w * 3:
        raise ValueError(f"truncated pixel data in {path}")
    return data[: h * w * 3].reshape(h, w, 3)


def write_bflw(path: str | Path, planes: np.ndarray, seed: int) -> None:
    """Write planar float32 maps with the 24-byte BFLW header.

    ``planes`` is (channels, h, w); channel order for targets is
    (v1, v2, v3, z0, w).  Little-endian throughout, row-major planes.
    """
    arr = np.asarray(planes)
    if arr.ndim != 3:
        raise ValueError(f"expected (channels, h, w), got shape {arr.shape}")
    c, h, w = arr.shape
    if not 1 <= c <= 65535 or h >= 2**32 or w >= 2**32:
        raise ValueError("plane dimensions out of header range")
    with open(path, "wb") as fh:
        fh.write(_BFLW_HEADER.pack(_BFLW_MAGIC, BFLW_VERSION, c, h, w, seed & (2**64 - 1)))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_bflw(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a BFLW file; returns (planes float64 (c, h, w), sample seed)."""
    with open(path, "rb") as fh:
        header = fh.read(_BFLW_HEADER.size)
        if len(header) < _BFLW_HEADER.size:
            raise ValueError(f"truncated BFLW header in {path}")
        magic, version, c, h, w, seed = _BFLW_HEADER.unpack(header)
        if magic != _BFLW_MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        if version != BFLW_VERSION:
            raise ValueError(f"unsupported BFLW version {version} in {path}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != c * h * w:
        raise ValueError(
            f"BFLW payload has {data.size} floats, header promises {c * h * w}: {path}"
        )
    return data.reshape(c, h, w).astype(np.float64), seed

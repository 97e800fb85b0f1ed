"""Volume helpers: FW3D file I/O, percentile normalization and masking.

Volumes are plain ``float32`` numpy arrays of shape ``(d0, d1, d2)`` in C order
(axis 2 fastest). Masks are volumes whose values are exactly 0 or 1.

FW3D layout (little-endian, 24-byte header)::

    offset  size  field
    0       4     magic b"FW3D"
    4       2     version (u16) = 1
    6       1     dtype (u8) = 0 -> float32
    7       1     flags (u8) = 0 for a volume, 1 for a wavelet coefficient set
    8       12    dims d0, d1, d2 (3 x u32)
    20      4     reserved; zero for volumes, float32 coefficient scale otherwise
    24      ...   payload, float32, axis 2 fastest
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from wavinpaint.errors import (
    DegenerateInputError,
    FormatError,
    ShapeError,
    ValidationError,
    VolumeIOError,
)

PathLike = Union[str, "os.PathLike[str]"]

MAGIC = b"FW3D"
VERSION = 1
DTYPE_FLOAT32 = 0
FLAG_VOLUME = 0
FLAG_COEFFS = 1
HEADER = struct.Struct("<4sHBB3I4s")
assert HEADER.size == 24


@dataclass(frozen=True)
class NormRecord:
    """Affine map ``y = x * scale + offset`` applied after clipping to ``[clip_lo, clip_hi]``."""

    scale: float
    offset: float
    clip_lo: float
    clip_hi: float

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if not self.clip_lo < self.clip_hi:
            raise ValidationError(f"clip_lo must be < clip_hi, got {self.clip_lo}, {self.clip_hi}")

    @classmethod
    def identity(cls) -> NormRecord:
        return cls(scale=1.0, offset=0.0, clip_lo=-1.0, clip_hi=1.0)


def check_volume(vol: np.ndarray, name: str = "volume", dtype=np.float32) -> np.ndarray:
    """Return ``vol`` as a 3D ``dtype`` array, raising if it is malformed or non-finite."""
    arr = np.asarray(vol)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be 3D, got shape {arr.shape}")
    if any(d <= 0 for d in arr.shape):
        raise ShapeError(f"{name} has an empty dimension: {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf values")
    return arr


def check_even(vol: np.ndarray, name: str = "volume") -> None:
    if any(d % 2 for d in np.shape(vol)[-3:]):
        raise ShapeError(f"{name} dims must all be even, got {np.shape(vol)[-3:]}")


def check_mask(m: np.ndarray, like: np.ndarray | None = None, name: str = "mask") -> np.ndarray:
    arr = check_volume(m, name)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValidationError(f"{name} must be binary (values 0 or 1)")
    if like is not None and arr.shape != np.shape(like):
        raise ShapeError(f"{name} shape {arr.shape} does not match {np.shape(like)}")
    return arr


# -- file I/O ---------------------------------------------------------------


def _write(path: PathLike, header: bytes, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read {path}: {exc}") from exc


def _parse_header(raw: bytes, path: PathLike) -> tuple[int, tuple[int, int, int], bytes]:
    if len(raw) < HEADER.size:
        raise VolumeIOError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, dtype, flags, d0, d1, d2, reserved = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if flags not in (FLAG_VOLUME, FLAG_COEFFS):
        raise FormatError(f"{path}: unknown flags {flags}")
    if min(d0, d1, d2) == 0:
        raise FormatError(f"{path}: zero dimension in header")
    return flags, (d0, d1, d2), reserved


def _payload(raw: bytes, count: int, path: PathLike) -> np.ndarray:
    body = raw[HEADER.size:]
    if len(body) != 4 * count:
        raise VolumeIOError(
            f"{path}: payload holds {len(body)} bytes, header declares {count} float32 values"
        )
    return np.frombuffer(body, dtype="<f4").astype(np.float32)


def save_volume(vol: np.ndarray, path: PathLike) -> None:
    """Write ``vol`` as an FW3D file. Output bytes depend only on the volume."""
    arr = check_volume(vol)
    header = HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, FLAG_VOLUME, *arr.shape, b"\0" * 4)
    _write(path, header, arr.astype("<f4").tobytes(order="C"))


def load_volume(path: PathLike) -> np.ndarray:
    raw = _read(path)
    flags, dims, reserved = _parse_header(raw, path)
    if flags != FLAG_VOLUME:
        raise FormatError(f"{path}: file holds wavelet coefficients, not a volume")
    if reserved != b"\0" * 4:
        raise FormatError(f"{path}: reserved header bytes are not zero")
    data = _payload(raw, math.prod(dims), path).reshape(dims)
    return check_volume(data)


def save_coeff_payload(bands: np.ndarray, scale: float, path: PathLike) -> None:
    """Write 8 sub-band volumes back to back under a coefficient-variant header."""
    bands = np.ascontiguousarray(bands, dtype=np.float32)
    if bands.ndim != 4 or bands.shape[0] != 8:
        raise ShapeError(f"expected (8, d0, d1, d2) bands, got {bands.shape}")
    if not np.all(np.isfinite(bands)):
        raise ValidationError("coefficients contain NaN or Inf values")
    header = HEADER.pack(
        MAGIC, VERSION, DTYPE_FLOAT32, FLAG_COEFFS, *bands.shape[1:], struct.pack("<f", scale)
    )
    _write(path, header, bands.astype("<f4").tobytes(order="C"))


def load_coeff_payload(path: PathLike) -> tuple[np.ndarray, float]:
    raw = _read(path)
    flags, dims, reserved = _parse_header(raw, path)
    if flags != FLAG_COEFFS:
        raise FormatError(f"{path}: file holds a volume, not wavelet coefficients")
    (scale,) = struct.unpack("<f", reserved)
    if not (math.isfinite(scale) and scale > 0):
        raise FormatError(f"{path}: invalid coefficient scale {scale}")
    data = _payload(raw, 8 * math.prod(dims), path).reshape((8, *dims))
    return data, float(scale)


# -- intensity normalization -------------------------------------------------


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile of an ascending array (no interpolation)."""
    n = sorted_values.size
    rank = max(math.ceil(q * n), 1)
    return float(sorted_values[min(rank, n) - 1])


def normalize(vol: np.ndarray, pct: float = 0.005) -> tuple[np.ndarray, NormRecord]:
    """Clip to the ``[pct, 1 - pct]`` nearest-rank quantiles and map them onto ``[-1, 1]``."""
    arr = check_volume(vol)
    if not 0.0 <= pct < 0.5:
        raise ValidationError(f"pct must lie in [0, 0.5), got {pct}")
    flat = np.sort(arr, axis=None).astype(np.float64)
    lo = nearest_rank(flat, pct)
    hi = nearest_rank(flat, 1.0 - pct)
    if not lo < hi:
        raise DegenerateInputError(f"volume has no range between its clip bounds ({lo}, {hi})")
    scale = 2.0 / (hi - lo)
    rec = NormRecord(scale=scale, offset=-1.0 - lo * scale, clip_lo=lo, clip_hi=hi)
    out = np.clip(arr.astype(np.float64), lo, hi) * rec.scale + rec.offset
    return np.clip(out, -1.0, 1.0).astype(np.float32), rec


def denormalize(vol: np.ndarray, rec: NormRecord) -> np.ndarray:
    arr = check_volume(vol)
    out = (arr.astype(np.float64) - rec.offset) / rec.scale
    return check_volume(out)


def apply_mask(g: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Voided image ``g * (1 - m)``."""
    g = check_volume(g, "image")
    m = check_mask(m, like=g)
    # np.where rather than g * (1 - m): avoids -0.0 for negative voxels
    return np.where(m == 1, np.float32(0), g)

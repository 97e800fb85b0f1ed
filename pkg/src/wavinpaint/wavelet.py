"""Single-level orthonormal 3D Haar transform.

The analysis filters are ``l = [1, 1] / sqrt(2)`` and ``h = [-1, 1] / sqrt(2)``
applied with stride 2 along axis 0, then 1, then 2. For the pair ``(a, b)`` at
positions ``(2k, 2k + 1)`` this gives ``l = (a + b) / sqrt(2)`` and
``h = (b - a) / sqrt(2)``.

Bands are stacked on a new axis in the order::

    0 lll  1 llh  2 lhl  3 lhh  4 hll  5 hlh  6 hhl  7 hhh

where letter ``i`` names the filter applied along spatial axis ``i``, i.e. the
band index is ``4 * f0 + 2 * f1 + f2`` with ``f = 1`` for the high-pass.

The array functions work on the last three axes and accept any leading batch
axes, so ``(N, C, D, H, W)`` volumes become ``(N, C * 8, D/2, H/2, W/2)``
coefficient tensors only after an explicit reshape by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wavinpaint.errors import ShapeError, ValidationError
from wavinpaint.volume import (
    PathLike,
    check_volume,
    load_coeff_payload,
    save_coeff_payload,
)

BAND_NAMES = ("lll", "llh", "lhl", "lhh", "hll", "hlh", "hhl", "hhh")
DEFAULT_COEFF_SCALE = 2.0 ** -1.5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def _analysis(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = [slice(None)] * x.ndim
    odd = [slice(None)] * x.ndim
    even[axis] = slice(0, None, 2)
    odd[axis] = slice(1, None, 2)
    a, b = x[tuple(even)], x[tuple(odd)]
    return (a + b) * _INV_SQRT2, (b - a) * _INV_SQRT2


def _synthesis(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    a = (lo - hi) * _INV_SQRT2
    b = (lo + hi) * _INV_SQRT2
    # interleave a (even positions) and b (odd positions) along `axis`
    out = np.stack([a, b], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] *= 2
    return out.reshape(shape)


def haar_dwt3(x: np.ndarray, coeff_scale: float = DEFAULT_COEFF_SCALE) -> np.ndarray:
    """Forward transform of the last three axes: ``(..., D, H, W) -> (..., 8, D/2, H/2, W/2)``."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeError(f"need at least 3 dims, got shape {x.shape}")
    if any(d % 2 for d in x.shape[-3:]):
        raise ShapeError(f"spatial dims must all be even, got {x.shape[-3:]}")
    if not coeff_scale > 0:
        raise ValidationError(f"coeff_scale must be positive, got {coeff_scale}")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    x = x.astype(dtype, copy=False)
    nd = x.ndim
    bands = [x]
    for axis in (nd - 3, nd - 2, nd - 1):
        bands = [part for band in bands for part in _analysis(band, axis)]
    out = np.stack(bands, axis=nd - 3)
    if coeff_scale != 1.0:
        out = out * coeff_scale
    return out.astype(dtype, copy=False)


def haar_idwt3(c: np.ndarray, coeff_scale: float = DEFAULT_COEFF_SCALE) -> np.ndarray:
    """Inverse of :func:`haar_dwt3`, including removal of ``coeff_scale``."""
    c = np.asarray(c)
    if c.ndim < 4 or c.shape[-4] != 8:
        raise ShapeError(f"expected (..., 8, d0, d1, d2) coefficients, got {c.shape}")
    if not coeff_scale > 0:
        raise ValidationError(f"coeff_scale must be positive, got {coeff_scale}")
    nd = c.ndim - 1  # rank of the reconstructed array
    if coeff_scale != 1.0:
        c = c / coeff_scale
    bands = [np.take(c, i, axis=nd - 3) for i in range(8)]
    for axis in (nd - 1, nd - 2, nd - 3):
        bands = [_synthesis(bands[i], bands[i + 1], axis) for i in range(0, len(bands), 2)]
    return bands[0].astype(c.dtype, copy=False)


@dataclass
class WaveletCoeffs:
    """Eight half-resolution sub-bands of a volume plus the scale baked into them."""

    bands: np.ndarray
    scale_applied: float = 1.0

    def __post_init__(self) -> None:
        self.bands = np.asarray(self.bands)
        if self.bands.ndim != 4 or self.bands.shape[0] != 8:
            raise ShapeError(f"bands must have shape (8, d0, d1, d2), got {self.bands.shape}")
        if not self.scale_applied > 0:
            raise ValidationError(f"scale_applied must be positive, got {self.scale_applied}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.bands.shape[1:])  # type: ignore[return-value]

    def band(self, name: str) -> np.ndarray:
        return self.bands[BAND_NAMES.index(name)]

    def save(self, path: PathLike) -> None:
        save_coeff_payload(self.bands, self.scale_applied, path)

    @classmethod
    def load(cls, path: PathLike) -> WaveletCoeffs:
        bands, scale = load_coeff_payload(path)
        return cls(bands, scale)


def dwt3(vol: np.ndarray, coeff_scale: float = DEFAULT_COEFF_SCALE) -> WaveletCoeffs:
    vol = check_volume(vol)
    return WaveletCoeffs(haar_dwt3(vol, coeff_scale), coeff_scale)


def idwt3(coeffs: WaveletCoeffs) -> np.ndarray:
    return check_volume(haar_idwt3(coeffs.bands, coeffs.scale_applied))

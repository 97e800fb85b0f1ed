"""SSIM, MSE and PSNR for 3D volumes, over the whole volume or a mask.

Local SSIM statistics use a separable, normalized Gaussian window (default
7 voxels, sigma 1.5) with symmetric-reflect boundary handling, so the SSIM map
has the same shape as the inputs and can be averaged over any region.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from wavinpaint.errors import ShapeError, ValidationError, VolumeIOError
from wavinpaint.volume import PathLike, check_mask, check_volume

K1, K2 = 0.01, 0.03


def _pair(a, b):
    a = check_volume(a, "a", np.float64)
    b = check_volume(b, "b", np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _region(region, like) -> Optional[np.ndarray]:
    if region is None:
        return None
    sel = check_mask(region, like=like) == 1
    if not sel.any():
        raise ValidationError("metric region is empty")
    return sel


def mse(a: np.ndarray, b: np.ndarray, region: Optional[np.ndarray] = None) -> float:
    a, b = _pair(a, b)
    sq = (a - b) ** 2
    sel = _region(region, a)
    return float(sq.mean() if sel is None else sq[sel].mean())


def psnr(a: np.ndarray, b: np.ndarray, data_range: float, region: Optional[np.ndarray] = None) -> float:
    """``10 log10(data_range^2 / mse)``; ``math.inf`` when the inputs agree exactly."""
    if not data_range > 0:
        raise ValidationError(f"data_range must be positive, got {data_range}")
    err = mse(a, b, region)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValidationError(f"window size must be odd and positive, got {size}")
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _smooth(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    for axis in range(3):
        x = ndimage.correlate1d(x, w, axis=axis, mode="reflect")
    return x


def ssim_map(a, b, data_range: float, window: int = 7, sigma: float = 1.5) -> np.ndarray:
    a, b = _pair(a, b)
    if not data_range > 0:
        raise ValidationError(f"data_range must be positive, got {data_range}")
    if any(d < window for d in a.shape):
        raise ShapeError(f"volume {a.shape} smaller than the {window}^3 window")
    w = gaussian_window(window, sigma)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _smooth(a, w), _smooth(b, w)
    var_a = _smooth(a * a, w) - mu_a**2
    var_b = _smooth(b * b, w) - mu_b**2
    cov = _smooth(a * b, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim3d(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float,
    window: int = 7,
    region: Optional[np.ndarray] = None,
    sigma: float = 1.5,
) -> float:
    smap = ssim_map(a, b, data_range, window, sigma)
    sel = _region(region, smap)
    value = float(smap.mean() if sel is None else smap[sel].mean())
    return float(np.clip(value, -1.0, 1.0))


@dataclass(frozen=True)
class MetricReport:
    ssim: float
    mse: float
    psnr: float
    region: str
    data_range: float


def evaluate(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: Optional[np.ndarray] = None,
    data_range: Optional[float] = None,
    window: int = 7,
) -> list:
    """Whole-volume report, plus a masked-region report when ``mask`` is given.

    ``data_range`` defaults to ``max(gt) - min(gt)``.
    """
    gt_arr = check_volume(gt, "gt", np.float64)
    if data_range is None:
        data_range = float(gt_arr.max()) - float(gt_arr.min())
    if not data_range > 0:
        raise ValidationError("ground truth is constant; pass data_range explicitly")
    regions = [("whole", None)] + ([("masked", mask)] if mask is not None else [])
    return [
        MetricReport(
            ssim=ssim3d(pred, gt_arr, data_range, window, region=sel),
            mse=mse(pred, gt_arr, sel),
            psnr=psnr(pred, gt_arr, data_range, sel),
            region=name,
            data_range=data_range,
        )
        for name, sel in regions
    ]


REPORT_FIELDS = ("volume_id", "region", "ssim", "mse", "psnr", "data_range")


def write_report(rows: Iterable[tuple], path: PathLike) -> None:
    """Write ``(volume_id, MetricReport)`` pairs as CSV."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_FIELDS)
            for vid, rep in rows:
                writer.writerow([vid, rep.region, repr(rep.ssim), repr(rep.mse), repr(rep.psnr), repr(rep.data_range)])
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc

"""Inpainting inference: the conditioned reverse loop, compositing and back-normalization."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from wavinpaint.denoiser import DenoiserModel
from wavinpaint.diffusion import SeededRng, posterior_sample
from wavinpaint.errors import ShapeError, ValidationError
from wavinpaint.schedule import Schedule
from wavinpaint.volume import NormRecord, apply_mask, check_even, check_mask, check_volume, denormalize
from wavinpaint.wavelet import DEFAULT_COEFF_SCALE, haar_dwt3, haar_idwt3

# (input24, t, T) -> predicted clean coefficients, shaped like input24[..., :8, :, :, :]
Predictor = Callable[[np.ndarray, int, int], np.ndarray]


@dataclass
class InpaintSample:
    """Ground truth ``g`` (optional at inference), mask ``m``, voided image ``v`` and the
    normalization record that maps the normalized volumes back to scanner units."""

    m: np.ndarray
    v: np.ndarray
    g: Optional[np.ndarray] = None
    norm: NormRecord = field(default_factory=NormRecord.identity)

    def __post_init__(self) -> None:
        self.v = check_volume(self.v, "v")
        check_even(self.v, "v")
        self.m = check_mask(self.m, like=self.v)
        if self.g is not None:
            self.g = check_volume(self.g, "g")
            if self.g.shape != self.v.shape:
                raise ShapeError(f"g shape {self.g.shape} does not match v {self.v.shape}")
            if not np.array_equal(apply_mask(self.g, self.m), self.v):
                raise ValidationError("v must equal g * (1 - m)")

    @classmethod
    def from_ground_truth(cls, g: np.ndarray, m: np.ndarray, norm: Optional[NormRecord] = None):
        return cls(m=m, v=apply_mask(g, m), g=g, norm=norm or NormRecord.identity())

    @property
    def shape(self) -> tuple:
        return self.v.shape


@dataclass(frozen=True)
class SamplerConfig:
    composite_known_region: bool = True
    clamp_x0: Optional[float] = None
    seed: int = 0
    coeff_scale: float = DEFAULT_COEFF_SCALE

    def __post_init__(self) -> None:
        if self.clamp_x0 is not None and not self.clamp_x0 > 0:
            raise ValidationError(f"clamp_x0 must be positive, got {self.clamp_x0}")
        if not self.coeff_scale > 0:
            raise ValidationError("coeff_scale must be positive")


def condition_channels(sample: InpaintSample, coeff_scale: float) -> np.ndarray:
    """Stacked wavelet coefficients of ``v`` and ``m``: shape ``(16, d0/2, d1/2, d2/2)``."""
    return np.concatenate([haar_dwt3(sample.v, coeff_scale), haar_dwt3(sample.m, coeff_scale)])


def inpaint(
    model: Union[DenoiserModel, Predictor],
    sample: InpaintSample,
    s: Schedule,
    cfg: SamplerConfig = SamplerConfig(),
    trace: Optional[list] = None,
) -> np.ndarray:
    """Run the ``T``-step reverse process and return the back-normalized volume.

    ``model`` is anything callable as ``model(input24, t, T)``. If ``trace`` is a
    list, the image-space prediction of every step is appended to it.
    """
    cs = cfg.coeff_scale
    rng = SeededRng(cfg.seed)
    cond = condition_channels(sample, cs)
    x_t = rng.normal((8, *cond.shape[1:])).astype(np.float32)
    y_hat = None
    for t in range(s.T, 0, -1):
        x0_hat = np.asarray(model(np.concatenate([cond, x_t]), t, s.T))
        if x0_hat.shape != x_t.shape:
            raise ShapeError(f"model returned {x0_hat.shape}, expected {x_t.shape}")
        y_hat = haar_idwt3(x0_hat, cs)
        if cfg.clamp_x0 is not None:
            y_hat = np.clip(y_hat, -cfg.clamp_x0, cfg.clamp_x0)
            x0_hat = haar_dwt3(y_hat, cs)
        if trace is not None:
            trace.append(y_hat.copy())
        x_t = posterior_sample(x_t, x0_hat.astype(np.float32), t, s, rng)

    out = check_volume(y_hat, "prediction")
    if cfg.composite_known_region:
        out = np.where(sample.m == 1, out, sample.v)
    return denormalize(out, sample.norm)


def mean_fill_baseline(sample: InpaintSample) -> np.ndarray:
    """Fill the mask with the mean of the unmasked, nonzero voxels of ``v``.

    "Nonzero" is judged in raw intensity units (after back-normalization) so
    that zero-valued background is excluded; with the identity record this is
    simply ``v != 0``.
    """
    if not np.any(sample.m == 1):
        raise ValidationError("mean-fill baseline needs a nonempty mask")
    raw = denormalize(sample.v, sample.norm)
    known = sample.v[(sample.m == 0) & (raw != 0)]
    fill = float(known.astype(np.float64).mean()) if known.size else 0.0
    out = np.where(sample.m == 1, np.float32(fill), sample.v)
    return denormalize(out, sample.norm)


def time_sampling(
    model: Union[DenoiserModel, Predictor],
    sample: InpaintSample,
    schedules: Sequence[Schedule],
    cfg: SamplerConfig = SamplerConfig(),
    repeats: int = 5,
) -> list:
    """Median wall time of :func:`inpaint` per schedule, after one warm-up call each."""
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    rows = []
    for s in schedules:
        inpaint(model, sample, s, cfg)
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            inpaint(model, sample, s, cfg)
            times.append(time.perf_counter() - start)
        rows.append(
            {
                "T": s.T,
                "median_s": statistics.median(times),
                "min_s": min(times),
                "max_s": max(times),
                "repeats": repeats,
            }
        )
    return rows

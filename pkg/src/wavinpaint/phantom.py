"""Synthetic soft-tissue phantoms with spherical healthy-tissue masks."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from wavinpaint.diffusion import SeededRng
from wavinpaint.errors import GenerationError, ShapeError, ValidationError
from wavinpaint.sampler import InpaintSample
from wavinpaint.volume import apply_mask, check_mask, check_volume, normalize, save_volume

FOREGROUND_FRACTION = 0.1
MAX_MASK_TRIES = 200


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    num_ellipsoids: Tuple[int, int] = (3, 6)
    smoothness: float = 1.0
    mask_radius: Tuple[int, int] = (3, 6)
    pct: float = 0.005

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(d < 8 or d % 2 for d in self.dims):
            raise ValidationError(f"dims must be three even sizes >= 8, got {self.dims}")
        lo, hi = self.num_ellipsoids
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad num_ellipsoids range {self.num_ellipsoids}")
        rlo, rhi = self.mask_radius
        if not 1 <= rlo <= rhi:
            raise ValidationError(f"bad mask_radius range {self.mask_radius}")
        if 2 * rhi + 1 > min(self.dims) // 2:
            raise ValidationError("mask radius too large to fit inside the foreground")
        if self.smoothness < 0:
            raise ValidationError("smoothness must be >= 0")


def _grid(dims):
    axes = [np.linspace(-1.0, 1.0, d) for d in dims]
    return np.meshgrid(*axes, indexing="ij")


def _soft_ellipsoid(coords, center, radii, edge=0.08) -> np.ndarray:
    r2 = sum(((c - c0) / r) ** 2 for c, c0, r in zip(coords, center, radii))
    # logistic edge so the blob boundary is smooth before the global blur
    return 1.0 / (1.0 + np.exp((np.sqrt(r2) - 1.0) / edge))


def _raw_intensity(spec: PhantomSpec, rng: SeededRng) -> Tuple[np.ndarray, np.ndarray]:
    coords = _grid(spec.dims)
    head_center = rng.uniform(-0.05, 0.05, 3)
    head_radii = rng.uniform(0.7, 0.88, 3)
    head = _soft_ellipsoid(coords, head_center, head_radii)
    img = rng.uniform(0.4, 0.6) * head

    n = int(rng.integers(*spec.num_ellipsoids))
    for _ in range(n):
        center = head_center + rng.uniform(-0.45, 0.45, 3) * head_radii
        radii = rng.uniform(0.15, 0.45, 3)
        img += rng.uniform(-0.3, 0.45) * _soft_ellipsoid(coords, center, radii, edge=0.12) * head

    texture = ndimage.gaussian_filter(rng.normal(spec.dims), sigma=2.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    img += 0.12 * texture * head
    img = np.clip(img, 0.0, None)
    if spec.smoothness > 0:
        img = ndimage.gaussian_filter(img, sigma=spec.smoothness)
    # scanner-like background: exactly zero outside the head
    img[head < 1e-3] = 0.0
    foreground = head > 0.5
    return img, foreground


def _place_mask(spec: PhantomSpec, fg: np.ndarray, rng: SeededRng) -> np.ndarray:
    idx = np.indices(spec.dims)
    candidates = np.argwhere(fg)
    for _ in range(MAX_MASK_TRIES):
        r = int(rng.integers(*spec.mask_radius))
        c = candidates[int(rng.integers(0, len(candidates) - 1))]
        sphere = sum((idx[a] - c[a]) ** 2 for a in range(3)) <= r * r
        if np.all(fg[sphere]):
            return sphere.astype(np.float32)
    raise GenerationError(f"could not place a mask inside the foreground (seed {spec.seed})")


def gen_phantom(spec: PhantomSpec) -> InpaintSample:
    """Normalized phantom ``g``, a spherical mask ``m`` inside the foreground, and ``v``."""
    rng = SeededRng(spec.seed)
    raw, head = _raw_intensity(spec, rng)
    fg = head & (raw > FOREGROUND_FRACTION * raw.max())
    g, rec = normalize(raw.astype(np.float32), spec.pct)
    m = _place_mask(spec, fg, rng)
    return InpaintSample.from_ground_truth(g, m, rec)


def gen_dataset(n: int, spec: PhantomSpec = PhantomSpec(), first_seed: int = 0) -> List[InpaintSample]:
    return [gen_phantom(replace(spec, seed=first_seed + i)) for i in range(n)]


def crop_to_cube(g: np.ndarray, m: np.ndarray, size: int):
    """Cube of edge ``size`` centred on the mask bounding box, shifted to stay in bounds.

    Returns ``(g', m', v')``.
    """
    g = check_volume(g, "g")
    m = check_mask(m, like=g)
    if size <= 0 or size % 2:
        raise ValidationError(f"crop size must be positive and even, got {size}")
    if any(size > d for d in g.shape):
        raise ShapeError(f"crop size {size} exceeds volume dims {g.shape}")
    hits = np.argwhere(m == 1)
    if hits.size == 0:
        raise ValidationError("cannot centre a crop on an empty mask")
    lo, hi = hits.min(axis=0), hits.max(axis=0)
    if np.any(hi - lo + 1 > size):
        raise ValidationError(f"mask extent {tuple(hi - lo + 1)} does not fit in a {size}^3 cube")
    starts = []
    for a in range(3):
        center = (lo[a] + hi[a] + 1) // 2
        starts.append(int(np.clip(center - size // 2, 0, g.shape[a] - size)))
    sl = tuple(slice(s0, s0 + size) for s0 in starts)
    g2, m2 = np.ascontiguousarray(g[sl]), np.ascontiguousarray(m[sl])
    return g2, m2, apply_mask(g2, m2)


def write_dataset(samples: List[InpaintSample], out_dir, seeds: List[int]) -> str:
    """Write ``<id>_{g,m,v}.fw3d`` triplets and ``manifest.csv``; returns the manifest path.

    The manifest carries the normalization record so predictions can be mapped
    back to the raw intensity range.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    rows = []
    for i, (sample, seed) in enumerate(zip(samples, seeds)):
        vid = f"phantom_{i:04d}"
        paths = {k: os.path.join(out_dir, f"{vid}_{k}.fw3d") for k in ("g", "m", "v")}
        save_volume(sample.g, paths["g"])
        save_volume(sample.m, paths["m"])
        save_volume(sample.v, paths["v"])
        rows.append(
            {
                "id": vid,
                "seed": seed,
                "g_path": os.path.basename(paths["g"]),
                "m_path": os.path.basename(paths["m"]),
                "v_path": os.path.basename(paths["v"]),
                "scale": repr(sample.norm.scale),
                "offset": repr(sample.norm.offset),
                "clip_lo": repr(sample.norm.clip_lo),
                "clip_hi": repr(sample.norm.clip_hi),
            }
        )
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return manifest

"""Training objective and loop for the conditioned x0-predicting denoiser.

Per sample the network sees ``concat[dwt(v), dwt(m), x_t]`` (24 channels),
predicts clean coefficients, and the inverse transform of that prediction is
scored in image space with ``L = L_recon + L_masked``. The inverse transform is
linear, so its adjoint is applied to the image-space gradient before it enters
the denoiser backward pass.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from wavinpaint.denoiser import (
    DenoiserConfig,
    DenoiserModel,
    forward_backward,
    init_model,
    save_checkpoint,
)
from wavinpaint.diffusion import SeededRng
from wavinpaint.errors import ShapeError, ValidationError, VolumeIOError
from wavinpaint.sampler import InpaintSample
from wavinpaint.schedule import Schedule, ScheduleParams, build_schedule
from wavinpaint.volume import PathLike, check_mask, check_volume
from wavinpaint.wavelet import DEFAULT_COEFF_SCALE, haar_dwt3, haar_idwt3

log = logging.getLogger(__name__)

LOSS_KINDS = ("squared", "absolute")
REFERENCE_LEARNING_RATE = 2e-5


@dataclass(frozen=True)
class TrainConfig:
    schedule: ScheduleParams = field(default_factory=lambda: ScheduleParams("VP", 2))
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    learning_rate: float = 1e-4
    batch_size: int = 2
    steps: int = 2000
    seed: int = 0
    coeff_scale: float = DEFAULT_COEFF_SCALE
    loss_kind: str = "squared"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValidationError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.coeff_scale > 0:
            raise ValidationError("coeff_scale must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    l_recon: float
    l_masked: float


# -- loss -----------------------------------------------------------------------


def _loss_and_grad(g: np.ndarray, y: np.ndarray, m: np.ndarray, kind: str):
    """Loss terms and ``dL/dy`` for one volume, in float64."""
    diff = y.astype(np.float64) - g.astype(np.float64)
    m = m.astype(np.float64)
    n_mask = max(float(m.sum()), 1.0)
    if kind == "squared":
        err, derr = diff * diff, 2.0 * diff
    else:
        err, derr = np.abs(diff), np.sign(diff)
    l_recon = float(err.mean())
    l_masked = float((m * err).sum() / n_mask)
    grad = derr / diff.size + m * derr / n_mask
    return LossBreakdown(l_recon + l_masked, l_recon, l_masked), grad


def compute_loss(g: np.ndarray, y_hat: np.ndarray, m: np.ndarray, kind: str = "squared") -> LossBreakdown:
    """Whole-volume mean error plus the mean error over masked voxels.

    An empty mask contributes ``l_masked = 0``.
    """
    g = check_volume(g, "g")
    y_hat = check_volume(y_hat, "y_hat")
    m = check_mask(m, like=g)
    if g.shape != y_hat.shape:
        raise ShapeError(f"g {g.shape} and y_hat {y_hat.shape} differ")
    if kind not in LOSS_KINDS:
        raise ValidationError(f"unknown loss kind {kind!r}")
    return _loss_and_grad(g, y_hat, m, kind)[0]


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(model: DenoiserModel, grads: Dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """In-place bias-corrected Adam step on ``model.params``."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in model.params.items():
        g = grads[name].astype(np.float64)
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p -= update.astype(p.dtype)


# -- steps ----------------------------------------------------------------------------


def _stack(samples: Sequence[InpaintSample]):
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"batch mixes volume shapes {sorted(shapes)}")
    if any(s.g is None for s in samples):
        raise ValidationError("training samples need ground truth g")
    g = np.stack([s.g for s in samples])
    v = np.stack([s.v for s in samples])
    m = np.stack([s.m for s in samples])
    return g, v, m


def loss_gradients(
    model: DenoiserModel,
    samples: Sequence[InpaintSample],
    ts: np.ndarray,
    eps: np.ndarray,
    s: Schedule,
    coeff_scale: float = DEFAULT_COEFF_SCALE,
    loss_kind: str = "squared",
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Batch-mean loss and its parameter gradients for fixed ``ts`` and noise ``eps``."""
    g, v, m = _stack(samples)
    n = len(samples)
    x0 = haar_dwt3(g, coeff_scale).astype(np.float64)
    ab = s.alpha_bar[np.asarray(ts)].reshape(-1, 1, 1, 1, 1)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    inp = np.concatenate([haar_dwt3(v, coeff_scale), haar_dwt3(m, coeff_scale), x_t], axis=1)
    breakdowns: List[LossBreakdown] = []

    def grad_fn(x0_hat: np.ndarray) -> np.ndarray:
        y_hat = haar_idwt3(x0_hat.astype(np.float64), coeff_scale)
        dy = np.empty_like(y_hat)
        for i in range(n):
            lb, dy[i] = _loss_and_grad(g[i], y_hat[i], m[i], loss_kind)
            breakdowns.append(lb)
        # adjoint of idwt(c) = H^T c / scale is H d / scale = dwt(d, 1 / scale)
        return haar_dwt3(dy / n, 1.0 / coeff_scale)

    _, _, grads = forward_backward(model, inp, ts, s.T, grad_fn)
    loss = LossBreakdown(
        total=float(np.mean([b.total for b in breakdowns])),
        l_recon=float(np.mean([b.l_recon for b in breakdowns])),
        l_masked=float(np.mean([b.l_masked for b in breakdowns])),
    )
    return loss, grads


def train_step(
    model: DenoiserModel,
    samples: Sequence[InpaintSample],
    s: Schedule,
    cfg: TrainConfig,
    rng: SeededRng,
    adam_state: AdamState,
) -> Tuple[LossBreakdown, np.ndarray]:
    """Draw ``t`` and noise per sample, compute the loss, take one Adam step in place.

    Returns the pre-update batch loss and the drawn time steps.
    """
    if isinstance(samples, InpaintSample):
        samples = [samples]
    ts = rng.integers(1, s.T, size=len(samples))
    eps = rng.normal((len(samples), 8, *(d // 2 for d in samples[0].shape)))
    loss, grads = loss_gradients(model, samples, ts, eps, s, cfg.coeff_scale, cfg.loss_kind)
    adam_update(model, grads, adam_state, cfg)
    return loss, ts


HISTORY_FIELDS = ("step", "t_drawn", "l_recon", "l_masked", "total")


def write_history(rows: Sequence[dict], path: PathLike) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


def train_loop(
    dataset: Sequence[InpaintSample],
    cfg: TrainConfig,
    model: Optional[DenoiserModel] = None,
    checkpoint_path: Optional[PathLike] = None,
    history_path: Optional[PathLike] = None,
    log_every: int = 100,
) -> Tuple[DenoiserModel, List[dict]]:
    """Train for ``cfg.steps`` steps over seeded epoch-wise shuffles of ``dataset``.

    History rows carry the batch-mean losses; ``t_drawn`` joins the per-sample
    steps with ``;`` when ``batch_size > 1``.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    s = build_schedule(cfg.schedule)
    if model is None:
        model = init_model(cfg.model, cfg.seed)
    shuffle_rng = SeededRng(cfg.seed + 1)
    noise_rng = SeededRng(cfg.seed + 2)
    adam = AdamState()
    history: List[dict] = []
    order: List[int] = []
    for step in range(1, cfg.steps + 1):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(shuffle_rng.permutation(len(dataset)))
            batch.append(dataset[order.pop(0)])
        loss, ts = train_step(model, batch, s, cfg, noise_rng, adam)
        history.append(
            {
                "step": step,
                "t_drawn": ";".join(str(int(t)) for t in ts),
                "l_recon": loss.l_recon,
                "l_masked": loss.l_masked,
                "total": loss.total,
            }
        )
        if log_every and step % log_every == 0:
            log.info("step %d  total %.5f  recon %.5f  masked %.5f", step, loss.total, loss.l_recon, loss.l_masked)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    if history_path is not None:
        write_history(history, history_path)
    return model, history

"""Variance schedules (linear, adapted linear, variance-preserving) and derived constants.

All arrays on :class:`Schedule` are float64 and indexed directly by the step
``t`` in ``0..T``. Index 0 is a placeholder for the per-step quantities
(``beta[0] = 0``, ``alpha[0] = 1``, posterior terms 0) and the true value for
``alpha_bar[0] = 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from wavinpaint.errors import ValidationError, VolumeIOError
from wavinpaint.volume import PathLike

Kind = Literal["L", "LA", "VP"]
VpForm = Literal["t_independent", "t_scaled"]

LINEAR_DEFAULTS = {"L": (1e-4, 0.02), "LA": (1e-4, 0.9999)}
VP_BETA_MIN = 0.1
VP_BETA_MAX = 20.0


@dataclass(frozen=True)
class ScheduleParams:
    kind: Kind
    T: int
    beta_1: Optional[float] = None
    beta_T: Optional[float] = None
    beta_min: float = VP_BETA_MIN
    beta_max: float = VP_BETA_MAX
    vp_form: VpForm = "t_independent"

    def __post_init__(self) -> None:
        kind = str(self.kind).upper()
        if kind not in ("L", "LA", "VP"):
            raise ValidationError(f"unknown schedule kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if isinstance(self.T, bool) or int(self.T) != self.T or self.T < 1:
            raise ValidationError(f"T must be a positive integer, got {self.T!r}")
        object.__setattr__(self, "T", int(self.T))
        if kind in LINEAR_DEFAULTS:
            b1, bT = LINEAR_DEFAULTS[kind]
            if self.beta_1 is None:
                object.__setattr__(self, "beta_1", b1)
            if self.beta_T is None:
                object.__setattr__(self, "beta_T", bT)
            for name in ("beta_1", "beta_T"):
                value = getattr(self, name)
                if not 0.0 < value < 1.0:
                    raise ValidationError(f"{name} must lie in (0, 1), got {value}")
        else:
            if not 0.0 < self.beta_min < self.beta_max:
                raise ValidationError(
                    f"need 0 < beta_min < beta_max, got {self.beta_min}, {self.beta_max}"
                )
            if self.vp_form not in ("t_independent", "t_scaled"):
                raise ValidationError(f"unknown vp_form {self.vp_form!r}")


def _betas(p: ScheduleParams) -> np.ndarray:
    T = p.T
    t = np.arange(1, T + 1, dtype=np.float64)
    if p.kind in ("L", "LA"):
        if T == 1:
            return np.array([p.beta_T], dtype=np.float64)
        return p.beta_1 + (t - 1.0) / (T - 1.0) * (p.beta_T - p.beta_1)
    lin = p.beta_min * t / T if p.vp_form == "t_scaled" else np.full(T, p.beta_min / T)
    exponent = lin + 0.5 * (p.beta_max - p.beta_min) * (2.0 * t - 1.0) / T**2
    return -np.expm1(-exponent)


@dataclass(frozen=True)
class Schedule:
    params: ScheduleParams
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    posterior_mean_coef_x0: np.ndarray = field(repr=False)
    posterior_mean_coef_xt: np.ndarray = field(repr=False)
    posterior_var: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return self.params.T

    @property
    def kind(self) -> str:
        return self.params.kind

    def check_step(self, t: int) -> int:
        if isinstance(t, bool) or int(t) != t or not 1 <= t <= self.T:
            raise ValidationError(f"step t={t!r} outside 1..{self.T}")
        return int(t)


def build_schedule(params: ScheduleParams) -> Schedule:
    betas = _betas(params)
    if not np.all((betas > 0.0) & (betas < 1.0)):
        raise ValidationError(f"schedule produced betas outside (0, 1): {params}")
    T = params.T
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # alpha_bar underflows to 0.0 for long, aggressive schedules (LA at T=1000);
    # strict monotonicity is only checkable while it is representable
    steps = np.diff(alpha_bar)
    if not np.all((steps < 0) | ((steps == 0) & (alpha_bar[1:] == 0))):
        raise ValidationError(f"alpha_bar is not strictly decreasing for {params}")

    coef_x0 = np.zeros(T + 1)
    coef_xt = np.zeros(T + 1)
    var = np.zeros(T + 1)
    ab_prev = alpha_bar[:-1]
    ab = alpha_bar[1:]
    coef_x0[1:] = np.sqrt(ab_prev) * betas / (1.0 - ab)
    coef_xt[1:] = np.sqrt(alpha[1:]) * (1.0 - ab_prev) / (1.0 - ab)
    var[1:] = betas * (1.0 - ab_prev) / (1.0 - ab)
    # alpha_bar[0] = 1 makes the first step deterministic; pin the exact values
    coef_x0[1], coef_xt[1], var[1] = 1.0, 0.0, 0.0

    arrays = (beta, alpha, alpha_bar, coef_x0, coef_xt, var)
    for arr in arrays:
        arr.setflags(write=False)
    return Schedule(params, *arrays)


def make_schedule(kind: str, T: int, **kwargs) -> Schedule:
    """Shorthand for ``build_schedule(ScheduleParams(kind, T, **kwargs))``."""
    return build_schedule(ScheduleParams(kind=kind, T=T, **kwargs))


def export_curves(schedules: Sequence[Schedule], path: PathLike) -> None:
    """Write one CSV row per ``(schedule, t)`` with the normalized step ``t / T``."""
    if not schedules:
        raise ValidationError("export_curves needs at least one schedule")
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "T", "t", "t_normalized", "beta", "alpha_bar"])
            for s in schedules:
                for t in range(1, s.T + 1):
                    writer.writerow(
                        [s.kind, s.T, t, repr(t / s.T), repr(float(s.beta[t])), repr(float(s.alpha_bar[t]))]
                    )
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class PerturbationReport:
    alpha_bar_T: float
    first_t_below_001: Optional[int]
    fully_perturbed: bool


def perturbation_report(s: Schedule) -> PerturbationReport:
    below = np.nonzero(s.alpha_bar[1:] < 0.01)[0]
    first = int(below[0]) + 1 if below.size else None
    ab_T = float(s.alpha_bar[s.T])
    return PerturbationReport(alpha_bar_T=ab_T, first_t_below_001=first, fully_perturbed=ab_T < 1e-3)


def vp_terminal_alpha_bar(beta_min: float = VP_BETA_MIN, beta_max: float = VP_BETA_MAX) -> float:
    """``alpha_bar[T]`` of the t-independent VP schedule, the same for every ``T``."""
    return math.exp(-(beta_min + beta_max) / 2.0)

"""Forward noising and posterior sampling on wavelet-coefficient states.

States are arrays of any shape (typically ``(8, d0, d1, d2)`` or a batch of
them) or :class:`~wavinpaint.wavelet.WaveletCoeffs`; the result has the same
type as the state argument. Arithmetic happens in float64 and is cast back to
the state's dtype.
"""

from __future__ import annotations

from typing import TypeVar, Union

import numpy as np

from wavinpaint.errors import ShapeError
from wavinpaint.schedule import Schedule
from wavinpaint.wavelet import WaveletCoeffs

State = TypeVar("State", np.ndarray, WaveletCoeffs)


class SeededRng:
    """Reproducible stream of draws.

    Backed by numpy's PCG64 bit generator; normal draws use numpy's ziggurat
    sampler. Two instances built from the same seed emit the same sequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=dtype)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high]`` (inclusive)."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self) -> SeededRng:
        """Child stream with a seed drawn from this one."""
        return SeededRng(int(self._gen.integers(0, 2**63 - 1)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def _unwrap(x: Union[np.ndarray, WaveletCoeffs]) -> np.ndarray:
    return x.bands if isinstance(x, WaveletCoeffs) else np.asarray(x)


def _rewrap(like, arr: np.ndarray):
    if isinstance(like, WaveletCoeffs):
        return WaveletCoeffs(arr.astype(like.bands.dtype, copy=False), like.scale_applied)
    like = np.asarray(like)
    dtype = like.dtype if np.issubdtype(like.dtype, np.floating) else np.float64
    return arr.astype(dtype, copy=False)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def q_sample(x0: State, t: int, eps: State, s: Schedule) -> State:
    """Closed-form marginal draw ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``."""
    t = s.check_step(t)
    a, e = _unwrap(x0), _unwrap(eps)
    _same_shape(a, e, "q_sample")
    ab = s.alpha_bar[t]
    out = np.sqrt(ab) * a.astype(np.float64) + np.sqrt(1.0 - ab) * e.astype(np.float64)
    return _rewrap(x0, out)


def q_step(x_prev: State, t: int, s: Schedule, rng: SeededRng) -> State:
    """One forward transition ``x_{t-1} -> x_t``."""
    t = s.check_step(t)
    a = _unwrap(x_prev).astype(np.float64)
    z = rng.normal(a.shape)
    out = np.sqrt(1.0 - s.beta[t]) * a + np.sqrt(s.beta[t]) * z
    return _rewrap(x_prev, out)


def posterior_mean_var(x_t: np.ndarray, x0_hat: np.ndarray, t: int, s: Schedule):
    t = s.check_step(t)
    mean = s.posterior_mean_coef_x0[t] * np.asarray(x0_hat, np.float64)
    mean = mean + s.posterior_mean_coef_xt[t] * np.asarray(x_t, np.float64)
    return mean, float(s.posterior_var[t])


def posterior_sample(x_t: State, x0_hat: State, t: int, s: Schedule, rng: SeededRng) -> State:
    """Draw ``x_{t-1}`` from ``q(x_{t-1} | x_t, x_0 = x0_hat)``.

    At ``t = 1`` the posterior variance is exactly zero and the result is
    ``x0_hat`` (no draw is consumed from ``rng``).
    """
    a, b = _unwrap(x_t), _unwrap(x0_hat)
    _same_shape(a, b, "posterior_sample")
    mean, var = posterior_mean_var(a, b, t, s)
    if var > 0.0:
        mean = mean + np.sqrt(var) * rng.normal(a.shape)
    return _rewrap(x_t, mean)

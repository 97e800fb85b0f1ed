"""Small time-conditioned 3D convnet predicting clean wavelet coefficients.

Architecture (all convolutions 3x3x3, stride 1, zero "same" padding)::

    x (N, 24, D, H, W)
      -> conv_in (24 -> C) + time_proj(sinusoidal(t / T)) -> SiLU
      -> [conv (C -> C) -> SiLU] * num_hidden_convs
      -> conv_out (C -> 8)

``conv_out`` starts at zero so an untrained model predicts all-zero
coefficients. Gradients are computed by hand; :func:`backward` returns
``d(sum(grad_out * forward(...))) / d(theta)`` for every parameter tensor.

The checkpoint format (little-endian) is ``b"FWCK"``, u16 version, u32 length
+ UTF-8 JSON of the config, u32 tensor count, then per tensor: u32 ndim,
ndim x u32 shape, float32 data. Tensors appear in :func:`param_names` order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from wavinpaint.diffusion import SeededRng
from wavinpaint.errors import FormatError, ShapeError, ValidationError, VolumeIOError
from wavinpaint.volume import PathLike

IN_CHANNELS = 24
OUT_CHANNELS = 8
KERNEL = 3
CKPT_MAGIC = b"FWCK"
CKPT_VERSION = 1
TIME_POSITION_SCALE = 1000.0

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class DenoiserConfig:
    hidden_channels: int = 16
    num_hidden_convs: int = 2
    time_embed_dim: Optional[int] = None

    def __post_init__(self) -> None:
        if self.hidden_channels < 4:
            raise ValidationError(f"hidden_channels must be >= 4, got {self.hidden_channels}")
        if self.num_hidden_convs < 0:
            raise ValidationError("num_hidden_convs must be >= 0")
        if self.time_embed_dim is None:
            object.__setattr__(self, "time_embed_dim", self.hidden_channels)
        if self.time_embed_dim < 2:
            raise ValidationError("time_embed_dim must be >= 2")


def param_shapes(cfg: DenoiserConfig) -> Dict[str, tuple]:
    C, E, k = cfg.hidden_channels, cfg.time_embed_dim, KERNEL
    shapes = {
        "conv_in.weight": (C, IN_CHANNELS, k, k, k),
        "conv_in.bias": (C,),
        "time_proj.weight": (C, E),
        "time_proj.bias": (C,),
    }
    for i in range(cfg.num_hidden_convs):
        shapes[f"hidden.{i}.weight"] = (C, C, k, k, k)
        shapes[f"hidden.{i}.bias"] = (C,)
    shapes["conv_out.weight"] = (OUT_CHANNELS, C, k, k, k)
    shapes["conv_out.bias"] = (OUT_CHANNELS,)
    return shapes


def param_names(cfg: DenoiserConfig) -> list:
    return list(param_shapes(cfg))


class DenoiserModel:
    """Config plus a name -> array parameter mapping. Calling it runs :func:`forward`."""

    def __init__(self, config: DenoiserConfig, params: Params):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ValidationError(f"parameter names {list(params)} do not match config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
            if not np.all(np.isfinite(params[name])):
                raise ValidationError(f"{name} has non-finite values")
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params["conv_in.weight"].dtype

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> DenoiserModel:
        return DenoiserModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> DenoiserModel:
        return DenoiserModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def __call__(self, input24: np.ndarray, t, T: int) -> np.ndarray:
        return forward(self, input24, t, T)


def init_model(cfg: DenoiserConfig, seed: int, dtype=np.float32) -> DenoiserModel:
    """Fan-in scaled uniform init (``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``); zero output layer."""
    gen = SeededRng(seed).generator
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("conv_out"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        layer = name.rsplit(".", 1)[0]
        wshape = param_shapes(cfg)[layer + ".weight"]
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = gen.uniform(-bound, bound, size=shape).astype(dtype)
    return DenoiserModel(cfg, params)


# -- layers -------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(N, C, D, H, W)`` -> ``(N, C*27, D*H*W)`` patches with zero padding 1.

    Row ``c * 27 + (9 * i + 3 * j + k)`` holds channel ``c`` shifted by kernel
    offset ``(i, j, k)``, matching ``weight.reshape(Cout, C * 27)``.
    """
    N, C, D, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((N, C, KERNEL**3, D, H, W), dtype=x.dtype)
    for idx, (i, j, k) in enumerate(np.ndindex(KERNEL, KERNEL, KERNEL)):
        cols[:, :, idx] = xp[:, :, i:i + D, j:j + H, k:k + W]
    return cols.reshape(N, C * KERNEL**3, D * H * W)


def _conv(cols: np.ndarray, weight: np.ndarray, spatial: tuple) -> np.ndarray:
    out = weight.reshape(weight.shape[0], -1) @ cols
    return out.reshape(cols.shape[0], weight.shape[0], *spatial)


def _conv_input_grad(grad: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # transpose of a same-padded correlation = correlation with the flipped,
    # channel-swapped kernel
    flipped = weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    return _conv(_im2col(grad), np.ascontiguousarray(flipped), grad.shape[2:])


def _conv_weight_grad(grad: np.ndarray, cols: np.ndarray, wshape: tuple) -> np.ndarray:
    N, Cout = grad.shape[:2]
    g = grad.reshape(N, Cout, -1)
    dw = sum(g[n] @ cols[n].T for n in range(N))
    return dw.reshape(wshape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def time_embedding(t: np.ndarray, T: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of ``1000 * t / T``: ``[sin(p * f_i), cos(p * f_i)]``."""
    pos = TIME_POSITION_SCALE * np.asarray(t, dtype=np.float64) / T
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    arg = pos[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(dtype)


def _prepare(model: DenoiserModel, input24: np.ndarray, t, T: int):
    x = np.asarray(input24)
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    if x.ndim != 5 or x.shape[1] != IN_CHANNELS:
        raise ShapeError(f"expected (N, {IN_CHANNELS}, D, H, W) input, got {np.shape(input24)}")
    if int(T) < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    ts = np.broadcast_to(np.asarray(t), (x.shape[0],))
    if np.any(ts < 0) or np.any(ts > T):
        raise ValidationError(f"time step(s) {ts} outside 0..{T}")
    return x.astype(model.dtype, copy=False), ts, squeeze


def _forward(model: DenoiserModel, x: np.ndarray, ts: np.ndarray, T: int):
    p, cfg = model.params, model.config
    spatial = x.shape[2:]
    emb = time_embedding(ts, T, cfg.time_embed_dim, model.dtype)
    proj = emb @ p["time_proj.weight"].T + p["time_proj.bias"]

    cache = {"emb": emb, "cols": [], "pre": []}
    cols = _im2col(x)
    h = _conv(cols, p["conv_in.weight"], spatial)
    h += (p["conv_in.bias"] + proj)[:, :, None, None, None]
    cache["cols"].append(cols)
    cache["pre"].append(h)
    a = h * _sigmoid(h)
    for i in range(cfg.num_hidden_convs):
        cols = _im2col(a)
        h = _conv(cols, p[f"hidden.{i}.weight"], spatial)
        h += p[f"hidden.{i}.bias"][None, :, None, None, None]
        cache["cols"].append(cols)
        cache["pre"].append(h)
        a = h * _sigmoid(h)
    cols = _im2col(a)
    out = _conv(cols, p["conv_out.weight"], spatial)
    out += p["conv_out.bias"][None, :, None, None, None]
    cache["cols"].append(cols)
    return out, cache


def _backward(model: DenoiserModel, cache: dict, grad_out: np.ndarray) -> Params:
    p, cfg = model.params, model.config
    grads: Params = {}
    cols = cache["cols"]
    layers = ["conv_in"] + [f"hidden.{i}" for i in range(cfg.num_hidden_convs)] + ["conv_out"]

    g = grad_out
    for idx in range(len(layers) - 1, -1, -1):
        name = layers[idx]
        w = p[name + ".weight"]
        grads[name + ".weight"] = _conv_weight_grad(g, cols[idx], w.shape)
        grads[name + ".bias"] = g.sum(axis=(0, 2, 3, 4))
        if idx == 0:
            # time projection feeds the same pre-activation as conv_in
            gt = g.sum(axis=(2, 3, 4))  # (N, C)
            grads["time_proj.weight"] = gt.T @ cache["emb"]
            grads["time_proj.bias"] = gt.sum(axis=0)
            break
        da = _conv_input_grad(g, w)
        h = cache["pre"][idx - 1]
        s = _sigmoid(h)
        g = da * (s * (1.0 + h * (1.0 - s)))

    return {name: grads[name].astype(p[name].dtype, copy=False) for name in p}


def forward(model: DenoiserModel, input24: np.ndarray, t, T: int) -> np.ndarray:
    """Predict 8-channel clean coefficients. Accepts ``(24, ...)`` or ``(N, 24, ...)`` input."""
    x, ts, squeeze = _prepare(model, input24, t, T)
    out, _ = _forward(model, x, ts, T)
    return out[0] if squeeze else out


def forward_backward(model: DenoiserModel, input24: np.ndarray, t, T: int, grad_fn):
    """Run forward, get ``grad_out = grad_fn(out)``, and return ``(out, grad_out, grads)``."""
    x, ts, squeeze = _prepare(model, input24, t, T)
    out, cache = _forward(model, x, ts, T)
    grad_out = grad_fn(out[0] if squeeze else out)
    g = np.asarray(grad_out, dtype=model.dtype)
    g = g[None] if squeeze else g
    if g.shape != out.shape:
        raise ShapeError(f"grad_out shape {np.shape(grad_out)} does not match output")
    return (out[0] if squeeze else out), grad_out, _backward(model, cache, g)


def backward(model: DenoiserModel, input24: np.ndarray, t, T: int, grad_out: np.ndarray) -> Params:
    _, _, grads = forward_backward(model, input24, t, T, lambda _out: grad_out)
    return grads


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: DenoiserModel, path: PathLike) -> None:
    cfg_bytes = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg_bytes)), cfg_bytes]
    chunks.append(struct.pack("<I", len(model.params)))
    for arr in model.params.values():
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path: PathLike) -> DenoiserModel:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise VolumeIOError(f"cannot read {path}: {exc}") from exc
    try:
        if raw[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
        version, n_cfg = struct.unpack_from("<HI", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        cfg = DenoiserConfig(**json.loads(raw[pos:pos + n_cfg].decode("utf-8")))
        pos += n_cfg
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        names = param_names(cfg)
        if count != len(names):
            raise FormatError(f"{path}: {count} tensors stored, config needs {len(names)}")
        params: Params = {}
        for name in names:
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            nbytes = 4 * math.prod(shape)
            if pos + nbytes > len(raw):
                raise VolumeIOError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(raw, "<f4", math.prod(shape), pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return DenoiserModel(cfg, params)

"""Dense-tensor substrate shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in float64.  Images and feature
maps are channel-first ``[C, H, W]`` (optionally with a leading batch axis
``[N, C, H, W]``); token sequences are ``[..., tokens, features]``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class ConfigError(ValueError):
    """Invalid hyper-parameter or configuration value."""


class EvaluationError(RuntimeError):
    """A function produced a non-finite value where a finite one was required."""


DTYPE = np.float64
GN_EPS = 1e-5


# ---------------------------------------------------------------------------
# random numbers and parameters
# ---------------------------------------------------------------------------

def make_rng(seed: int | Iterable[int]) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def name_seed(seed: int, name: str) -> list[int]:
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))]


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


@dataclass(frozen=True)
class InitSpec:
    dist: str
    gain: float = 1.0
    std: float = 0.0


class ParamStore:
    """Named collection of learnable tensors.

    Every tensor is created through :meth:`create`, which records how it was
    initialised.  The random stream of a tensor depends only on the store seed
    and the tensor's name, so adding layers never perturbs existing ones.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.tensors: dict[str, np.ndarray] = {}
        self.specs: dict[str, InitSpec] = {}

    def create(self, name: str, shape, init: str = "trunc_normal", gain: float = 1.0,
               fan_in: int | None = None, std: float | None = None) -> np.ndarray:
        if name in self.tensors:
            raise ConfigError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "trunc_normal":
            if std is None:
                fan = fan_in if fan_in is not None else (int(np.prod(shape[1:])) if len(shape) > 1 else shape[0])
                std = gain / math.sqrt(max(fan, 1))
            value = truncated_normal(make_rng(name_seed(self.seed, name)), shape, std)
        elif init == "zeros":
            value, std = np.zeros(shape, dtype=DTYPE), 0.0
        elif init == "ones":
            value, std = np.ones(shape, dtype=DTYPE), 0.0
        elif init == "identity":
            if len(shape) != 2:
                raise ConfigError("identity init needs a 2-D shape")
            value, std = np.eye(shape[0], shape[1], dtype=DTYPE) * gain, 0.0
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.tensors[name] = value
        self.specs[name] = InitSpec(init, gain, float(std))
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.tensors:
            raise KeyError(name)
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.tensors[name].shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self.tensors[name].shape}")
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.tensors if n.startswith(prefix))

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {n: self.tensors[n] for n in self.names(prefix)}

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed)
        other.tensors = {k: v.copy() for k, v in self.tensors.items()}
        other.specs = dict(self.specs)
        return other

    def num_params(self, prefix: str = "") -> int:
        return sum(self.tensors[n].size for n in self.names(prefix))


# ---------------------------------------------------------------------------
# dense primitives
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def group_norm(x: np.ndarray, groups: int, gamma=None, beta=None, eps: float = GN_EPS) -> np.ndarray:
    """Group normalisation over ``[C, ...]`` or ``[N, C, ...]`` input.

    A 3-D input is treated as a single ``[C, H, W]`` sample; pass a 4-D array
    for a batch.  ``gamma``/``beta`` are per-channel.
    """
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim <= 3
    xb = x[None] if single else x
    n, c = xb.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    g = xb.reshape(n, groups, -1)
    mean = g.mean(axis=2, keepdims=True)
    var = g.var(axis=2, keepdims=True)
    y = ((g - mean) / np.sqrt(var + eps)).reshape(xb.shape)
    bshape = (1, c) + (1,) * (xb.ndim - 2)
    if gamma is not None:
        y = y * np.reshape(gamma, bshape)
    if beta is not None:
        y = y + np.reshape(beta, bshape)
    return y[0] if single else y


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    return np.pad(x, pad)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[Cin, H, W]`` or ``[N, Cin, H, W]``; ``kernel`` is
    ``[Cout, Cin, kh, kw]``.
    """
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 3
    xb = x[None] if single else x
    cout, cin, kh, kw = kernel.shape
    if xb.shape[1] != cin:
        raise DimensionError(f"conv2d: input has {xb.shape[1]} channels, kernel expects {cin}")
    xp = _pad_hw(xb, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, kernel, optimize=True)
    if bias is not None:
        out = out + np.reshape(bias, (1, cout, 1, 1))
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray, stride: int = 1,
                    padding: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` wrt its input, kernel and bias."""
    single = x.ndim == 3
    xb = x[None] if single else x
    gb = grad_out[None] if single else grad_out
    cout, cin, kh, kw = kernel.shape
    xp = _pad_hw(xb, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = gb.shape[2:]
    win = win[:, :, :oh, :ow]
    gk = np.einsum("nchwij,nohw->ocij", win, gb, optimize=True)
    gbias = gb.sum(axis=(0, 2, 3))
    gxp = np.zeros_like(xp)
    contrib = np.einsum("nohw,ocij->nchwij", gb, kernel, optimize=True)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib[..., i, j]
    gx = gxp[:, :, padding:padding + xb.shape[2], padding:padding + xb.shape[3]] if padding else gxp
    return (gx[0] if single else gx), gk, gbias


def avg_pool(x: np.ndarray, axes) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    if not axes:
        raise ConfigError("avg_pool needs at least one axis")
    for a in axes:
        if x.shape[a] == 0:
            raise ConfigError(f"avg_pool: axis {a} is empty")
    return x.mean(axis=axes)


def linear(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """Apply ``x @ weight`` on the last axis; ``weight`` is ``[in, out]``."""
    y = np.asarray(x, dtype=DTYPE) @ weight
    return y if bias is None else y + bias


def multi_head_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int = 1) -> np.ndarray:
    """Unmasked scaled dot-product attention split over ``heads``.

    ``q`` is ``[..., Nq, d]``, ``k`` is ``[..., Nk, d]`` and ``v`` is
    ``[..., Nk, dv]``.  Both ``d`` and ``dv`` must divide by ``heads``; the
    per-head outputs are concatenated back to ``[..., Nq, dv]``.
    """
    q, k, v = (np.asarray(t, dtype=DTYPE) for t in (q, k, v))
    d, dv = q.shape[-1], v.shape[-1]
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    if heads < 1 or d % heads or dv % heads:
        raise ConfigError(f"attention: dims ({d}, {dv}) not divisible by {heads} heads")
    dh, dvh = d // heads, dv // heads
    lead = q.shape[:-2]
    qh = q.reshape(lead + (q.shape[-2], heads, dh)).swapaxes(-2, -3)
    kh = k.reshape(k.shape[:-2] + (k.shape[-2], heads, dh)).swapaxes(-2, -3)
    vh = v.reshape(v.shape[:-2] + (v.shape[-2], heads, dvh)).swapaxes(-2, -3)
    scores = (qh @ kh.swapaxes(-1, -2)) / math.sqrt(dh)
    out = softmax(scores, axis=-1) @ vh
    return out.swapaxes(-2, -3).reshape(lead + (q.shape[-2], dv))


def attend(store: ParamStore, prefix: str, x: np.ndarray, context: np.ndarray, heads: int,
           qk_bias_q=None, qk_bias_k=None) -> np.ndarray:
    """Projected attention (pre-residual): ``MHA(x Wq, c Wk, c Wv) Wo + bo``.

    The optional ``qk_bias_*`` arrays are added to the query / key inputs
    only (used for positional codes that must not leak into values).
    """
    xq = x if qk_bias_q is None else x + qk_bias_q
    ck = context if qk_bias_k is None else context + qk_bias_k
    q = linear(xq, store[prefix + ".wq"])
    k = linear(ck, store[prefix + ".wk"])
    v = linear(context, store[prefix + ".wv"])
    out = multi_head_attention(q, k, v, heads)
    return linear(out, store[prefix + ".wo"], store[prefix + ".bo"])


def init_attention(store: ParamStore, prefix: str, dim: int, context_dim: int | None = None,
                   zero_out: bool = False) -> None:
    context_dim = dim if context_dim is None else context_dim
    store.create(prefix + ".wq", (dim, dim), fan_in=dim)
    store.create(prefix + ".wk", (context_dim, dim), fan_in=context_dim)
    store.create(prefix + ".wv", (context_dim, dim), fan_in=context_dim)
    if zero_out:
        store.create(prefix + ".wo", (dim, dim), init="zeros")
    else:
        store.create(prefix + ".wo", (dim, dim), fan_in=dim)
    store.create(prefix + ".bo", (dim,), init="zeros")


def tokens(x: np.ndarray) -> np.ndarray:
    """``[..., C, H, W]`` feature map to ``[..., H*W, C]`` tokens."""
    return np.swapaxes(x.reshape(x.shape[:-2] + (-1,)), -1, -2)


def untokens(t: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.swapaxes(t, -1, -2).reshape(t.shape[:-2] + (t.shape[-1], h, w))


# ---------------------------------------------------------------------------
# positional codes
# ---------------------------------------------------------------------------

def sinusoidal_embedding(positions, d: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos code ``[len(positions), d]`` (channel 2i sin, 2i+1 cos)."""
    pos = np.asarray(positions, dtype=DTYPE).reshape(-1, 1)
    n_freq = (d + 1) // 2
    freqs = base ** (-np.arange(n_freq, dtype=DTYPE) * 2.0 / max(d, 1))
    ang = pos * freqs
    out = np.empty((pos.shape[0], d), dtype=DTYPE)
    out[:, 0::2] = np.sin(ang)[:, : (d + 1) // 2]
    out[:, 1::2] = np.cos(ang)[:, : d // 2]
    return out


def sinusoidal_pos_enc(h: int, w: int, d: int) -> np.ndarray:
    """2-D code ``[d, h, w]``: the first half of the channels encodes the row,
    the second half the column."""
    if d % 2:
        raise ConfigError(f"sinusoidal_pos_enc needs an even dimension, got {d}")
    half = d // 2
    rows = sinusoidal_embedding(np.arange(h), half)  # [h, half]
    cols = sinusoidal_embedding(np.arange(w), half)  # [w, half]
    out = np.empty((d, h, w), dtype=DTYPE)
    out[:half] = rows.T[:, :, None]
    out[half:] = cols.T[:, None, :]
    return out


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=DTYPE) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Resize ``[..., H, W]`` with half-pixel (align-corners-false) sampling."""
    if new_h < 1 or new_w < 1:
        raise ConfigError("bilinear_resize: target size must be positive")
    x = np.asarray(x, dtype=DTYPE)
    h, w = x.shape[-2:]
    if (h, w) == (new_h, new_w):
        return x.copy()
    y0, y1, fy = _resize_axis(h, new_h)
    x0, x1, fx = _resize_axis(w, new_w)
    rows = x[..., y0, :] * (1 - fy)[:, None] + x[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def _sample_coords(h: int, w: int, offsets: np.ndarray):
    if not np.all(np.isfinite(offsets)):
        raise EvaluationError("bilinear sampling with non-finite offsets")
    gy, gx = np.meshgrid(np.arange(h, dtype=DTYPE), np.arange(w, dtype=DTYPE), indexing="ij")
    py = gy + offsets[0]
    px = gx + offsets[1]
    in_y = (py >= 0) & (py <= h - 1)
    in_x = (px >= 0) & (px <= w - 1)
    py = np.clip(py, 0, h - 1)
    px = np.clip(px, 0, w - 1)
    y0 = np.minimum(np.floor(py).astype(int), max(h - 2, 0))
    x0 = np.minimum(np.floor(px).astype(int), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return py - y0, px - x0, y0, y1, x0, x1, in_y, in_x


def bilinear_sample(x: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sample ``x[:, y+dy, x+dx]`` bilinearly with border clamping.

    ``x`` is ``[C, H, W]``; ``offsets`` is ``[2, H, W]`` holding (dy, dx) in
    pixels.
    """
    x = np.asarray(x, dtype=DTYPE)
    h, w = x.shape[-2:]
    wy, wx, y0, y1, x0, x1, _, _ = _sample_coords(h, w, np.asarray(offsets, dtype=DTYPE))
    top = x[:, y0, x0] * (1 - wx) + x[:, y0, x1] * wx
    bot = x[:, y1, x0] * (1 - wx) + x[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def bilinear_sample_backward(x: np.ndarray, offsets: np.ndarray,
                             grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`bilinear_sample` wrt the image and the offsets.

    Offsets that were clamped at the border receive zero gradient along the
    clamped axis.
    """
    h, w = x.shape[-2:]
    wy, wx, y0, y1, x0, x1, in_y, in_x = _sample_coords(h, w, offsets)
    a, b = x[:, y0, x0], x[:, y0, x1]
    c, d = x[:, y1, x0], x[:, y1, x1]
    d_wx = (1 - wy) * (b - a) + wy * (d - c)
    d_wy = ((c * (1 - wx) + d * wx) - (a * (1 - wx) + b * wx))
    g_off = np.stack([(grad_out * d_wy).sum(axis=0) * (in_y if h > 1 else 0),
                      (grad_out * d_wx).sum(axis=0) * (in_x if w > 1 else 0)])
    gx = np.zeros_like(x)
    for yy, xx, wgt in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                        (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
        for ch in range(x.shape[0]):
            np.add.at(gx[ch], (yy, xx), grad_out[ch] * wgt)
    return gx, g_off


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    n_probed: int
    per_param: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_param": self.worst_param,
            "worst_index": list(self.worst_index),
            "analytic": self.analytic,
            "numeric": self.numeric,
            "n_probed": self.n_probed,
            "per_param": dict(sorted(self.per_param.items())),
        }


def _rel_err(ga: float, gn: float) -> float:
    return abs(ga - gn) / max(1e-8, abs(ga) + abs(gn))


def grad_check(f: Callable[[Mapping[str, np.ndarray]], float], params: Mapping[str, np.ndarray] | np.ndarray,
               analytic_grad: Mapping[str, np.ndarray] | np.ndarray, h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare an analytic gradient with central differences.

    ``params`` and ``analytic_grad`` are dicts of arrays (a bare array is
    wrapped as ``{"x": array}`` and ``f`` then receives the array).  Every
    coordinate is probed unless a tensor has more than ``max_coords`` entries;
    those tensors are checked along ``max_coords`` random unit directions
    instead, comparing directional derivatives.
    """
    bare = isinstance(params, np.ndarray)
    if bare:
        params = {"x": params}
        analytic_grad = {"x": analytic_grad}
        fn = lambda p: f(p["x"])  # noqa: E731
    else:
        fn = f
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    rng = rng if rng is not None else make_rng(0)

    def evaluate() -> float:
        val = float(fn(work))
        if not math.isfinite(val):
            raise EvaluationError(f"grad_check: objective returned {val}")
        return val

    evaluate()
    best = GradCheckResult(0.0, "", (), 0.0, 0.0, 0)
    for name in sorted(work):
        p, g = work[name], np.asarray(analytic_grad[name], dtype=DTYPE)
        worst = 0.0
        if max_coords is None or p.size <= max_coords:
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                fp = evaluate()
                p[idx] = old - h
                fm = evaluate()
                p[idx] = old
                gn = (fp - fm) / (2 * h)
                err = _rel_err(float(g[idx]), gn)
                best.n_probed += 1
                worst = max(worst, err)
                if err > best.max_rel_error or not best.worst_param:
                    best.max_rel_error, best.worst_param, best.worst_index = err, name, idx
                    best.analytic, best.numeric = float(g[idx]), gn
        else:
            for probe in range(max_coords):
                direction = rng.standard_normal(p.shape)
                direction /= np.linalg.norm(direction)
                old = p.copy()
                p += h * direction
                fp = evaluate()
                p[...] = old - h * direction
                fm = evaluate()
                p[...] = old
                gn = (fp - fm) / (2 * h)
                ga = float(np.sum(g * direction))
                err = _rel_err(ga, gn)
                best.n_probed += 1
                worst = max(worst, err)
                if err > best.max_rel_error or not best.worst_param:
                    best.max_rel_error, best.worst_param, best.worst_index = err, name, ("dir", probe)
                    best.analytic, best.numeric = ga, gn
        best.per_param[name] = worst
    return best


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise EvaluationError(f"{what} contains non-finite values")
    return x

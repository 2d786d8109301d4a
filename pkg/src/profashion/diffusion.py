"""Noise schedule, v-prediction algebra, losses, DDIM sampling with guidance,
window blending for long videos, and the two-stage toy training loop."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .config import ModelConfig, block_plan
from .fpi import (ForwardCache, denoiser_forward, fta_param_names, offset_head_backward,
                  readout_backward, readout_param_names)
from .numcore import DTYPE, ConfigError, DimensionError, EvaluationError, ParamStore
from .ppa import PrototypeStack
from .refenc import latent_bounds


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    kind: str = "cosine"
    s: float = 0.008

    @property
    def alpha_bar(self) -> np.ndarray:
        return _alpha_bar_table(self.T, self.kind, self.s)

    def check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T) or np.any(t != np.round(t)):
            raise ConfigError(f"timestep {t} outside [0, {self.T - 1}]")
        return t.astype(int)

    def alpha_bar_at(self, t):
        return self.alpha_bar[self.check(t)]

    def sigma_at(self, t):
        return np.sqrt(1.0 - self.alpha_bar_at(t))


@lru_cache(maxsize=8)
def _alpha_bar_table(T: int, kind: str, s: float) -> np.ndarray:
    if kind == "cosine":
        f = lambda u: np.cos((u / T + s) / (1 + s) * np.pi / 2) ** 2  # noqa: E731
        steps = np.arange(T + 1, dtype=DTYPE)
        betas = np.minimum(1.0 - f(steps[1:]) / f(steps[:-1]), 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
    else:
        raise ConfigError(f"unknown schedule {kind!r}")
    table = np.cumprod(1.0 - betas)
    table.setflags(write=False)
    return table


def default_schedule() -> NoiseSchedule:
    return NoiseSchedule()


def _coef(t, schedule: NoiseSchedule, ndim: int):
    ab = np.asarray(schedule.alpha_bar_at(t), dtype=DTYPE)
    shape = ab.shape + (1,) * (ndim - ab.ndim)
    return np.sqrt(ab).reshape(shape), np.sqrt(1.0 - ab).reshape(shape)


def add_noise(x0: np.ndarray, eps: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab) x0 + sigma eps``; a vector ``t`` applies per leading index."""
    a, s = _coef(t, schedule, np.ndim(x0))
    return a * x0 + s * eps


def v_target(x0: np.ndarray, eps: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    a, s = _coef(t, schedule, np.ndim(x0))
    return a * eps - s * x0


def x0_from_v(x_t: np.ndarray, v: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    a, s = _coef(t, schedule, np.ndim(x_t))
    return a * x_t - s * v


def eps_from_v(x_t: np.ndarray, v: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    a, s = _coef(t, schedule, np.ndim(x_t))
    return s * x_t + a * v


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_denoise(v_pred: np.ndarray, v_tgt: np.ndarray) -> float:
    if np.shape(v_pred) != np.shape(v_tgt):
        raise DimensionError(f"loss_denoise: {np.shape(v_pred)} vs {np.shape(v_tgt)}")
    return float(np.mean((np.asarray(v_pred) - np.asarray(v_tgt)) ** 2))


def loss_denoise_grad(v_pred: np.ndarray, v_tgt: np.ndarray) -> np.ndarray:
    return 2.0 * (v_pred - v_tgt) / v_pred.size


def offset_mask(delta: np.ndarray) -> np.ndarray:
    """Cells where the target flow is non-zero, ``[..., 1, h, w]``."""
    return (np.abs(delta).sum(axis=-3, keepdims=True) > 0).astype(DTYPE)


def loss_offset(offsets: list, deltas: list, with_grad: bool = False):
    """Masked MSE between offsets and target flow.

    ``offsets`` and ``deltas`` are parallel lists (one entry per FTA block) of
    ``[N_f, 2, h, w]`` arrays.  Each (block, frame) pair with a non-empty mask
    contributes the mean squared error over its masked cells and both
    components; the loss is the mean of those terms and 0 when there are none.
    """
    terms = []
    for o, d in zip(offsets, deltas):
        o, d = np.asarray(o, dtype=DTYPE), np.asarray(d, dtype=DTYPE)
        if o.shape != d.shape:
            raise DimensionError(f"loss_offset: {o.shape} vs {d.shape}")
        m = offset_mask(d)
        for i in range(o.shape[0]):
            cnt = 2.0 * m[i].sum()
            if cnt > 0:
                terms.append((o[i], d[i], m[i], cnt))
    if not terms:
        return (0.0, [np.zeros_like(np.asarray(o, dtype=DTYPE)) for o in offsets]) if with_grad else 0.0
    n = len(terms)
    loss = sum(float(((o - d) ** 2 * m).sum() / c) for o, d, m, c in terms) / n
    if not with_grad:
        return loss
    grads = []
    for o, d in zip(offsets, deltas):
        o, d = np.asarray(o, dtype=DTYPE), np.asarray(d, dtype=DTYPE)
        m = offset_mask(d)
        cnt = 2.0 * m.sum(axis=(1, 2, 3), keepdims=True)
        grads.append(np.where(cnt > 0, 2.0 * (o - d) * m / np.maximum(cnt, 1.0), 0.0) / n)
    return loss, grads


def total_loss(l_d: float, l_o: float, lam: float) -> float:
    if lam < 0:
        raise ConfigError(f"loss weight must be non-negative, got {lam}")
    return l_d + lam * l_o


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def cfg_combine(v_uncond: np.ndarray, v_cond: np.ndarray, s: float) -> np.ndarray:
    if s == 1:
        return np.array(v_cond, dtype=DTYPE, copy=True)
    if s == 0:
        return np.array(v_uncond, dtype=DTYPE, copy=True)
    return v_uncond + s * (v_cond - v_uncond)


@dataclass
class SampleConfig:
    ddim_steps: int = 35
    cfg_scale: float = 3.5
    window: int = 12
    stride: int = 8
    clip_x0: bool = True
    threshold_quantile: float | None = 0.995

    def validate(self, schedule: NoiseSchedule) -> "SampleConfig":
        if not 1 <= self.ddim_steps <= schedule.T:
            raise ConfigError(f"ddim_steps must be in [1, {schedule.T}]")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be non-negative")
        if self.window < 1 or not 1 <= self.stride <= self.window:
            raise ConfigError("need 1 <= stride <= window")
        return self


def ddim_timesteps(steps: int, schedule: NoiseSchedule, start: int | None = None) -> np.ndarray:
    """Uniformly spaced, strictly decreasing sub-schedule ending at t=0."""
    start = schedule.T - 1 if start is None else int(start)
    ts = np.unique(np.round(np.linspace(0, start, steps)).astype(int))[::-1]
    return ts


def threshold_x0(x0: np.ndarray, lo, hi, quantile: float | None = 0.995) -> np.ndarray:
    """Pull an x0 estimate back into ``[lo, hi]``.

    With ``quantile`` set, each sample is first shrunk towards the box centre
    by its ``quantile``-th largest relative excursion (when that exceeds the
    box), then clipped; ``None`` only clips.
    """
    if quantile is not None:
        centre, half = (lo + hi) / 2.0, (hi - lo) / 2.0
        rel = np.abs((x0 - centre) / half).reshape(x0.shape[0], -1)
        q = np.maximum(np.quantile(rel, quantile, axis=1), 1.0).reshape((-1,) + (1,) * (x0.ndim - 1))
        x0 = np.where(q > 1.0, centre + (x0 - centre) / q, x0)
    return np.clip(x0, lo, hi)


def ddim_sample(model: Callable, x_T: np.ndarray, schedule: NoiseSchedule, steps: int = 35,
                cfg_scale: float = 1.0, start: int | None = None, record: list | None = None,
                x0_bounds: tuple | None = None, quantile: float | None = None) -> np.ndarray:
    """Deterministic DDIM (eta = 0) with a v-predicting model.

    ``model(x_t, t, conditional)`` returns v.  With ``cfg_scale`` other than
    1 both branches are evaluated and blended.  ``x0_bounds = (lo, hi)``
    thresholds every x0 estimate (see :func:`threshold_x0`) and the noise
    estimate is recomputed from it.  ``record`` collects the latent after
    every step.  The returned array is the x0 estimate after the final step.
    """
    ts = ddim_timesteps(steps, schedule, start)
    x = np.array(x_T, dtype=DTYPE, copy=True)
    x0 = x
    for k, t in enumerate(ts):
        v = model(x, int(t), True)
        if cfg_scale != 1:
            v = cfg_combine(model(x, int(t), False), v, cfg_scale)
        x0 = x0_from_v(x, v, t, schedule)
        eps = eps_from_v(x, v, t, schedule)
        if x0_bounds is not None:
            x0 = threshold_x0(x0, *x0_bounds, quantile=quantile)
            a, s = _coef(t, schedule, x.ndim)
            eps = (x - a * x0) / s
        if k + 1 < len(ts):
            t_prev = ts[k + 1]
            x = add_noise(x0, eps, t_prev, schedule)
        if record is not None:
            record.append(x.copy())
    return x0


def window_starts(n_frames: int, window: int, stride: int) -> list:
    if n_frames <= window:
        return [0]
    starts = list(range(0, n_frames - window + 1, stride))
    if starts[-1] + window < n_frames:
        starts.append(n_frames - window)
    return starts


def ramp_weights(n: int) -> np.ndarray:
    """Triangular weights peaking mid-window, positive at both ends."""
    i = np.arange(n, dtype=DTYPE)
    return np.minimum(i + 1, n - i)


def temporal_window_aggregate(windows: list, stride: int | None = None, starts: list | None = None,
                              n_frames: int | None = None) -> np.ndarray:
    """Blend overlapping windows ``[N_f, ...]`` into one sequence.

    Window ``k`` starts at ``starts[k]`` (default ``k * stride``).  Every output
    frame is the ramp-weighted mean of the windows covering it.
    """
    if not windows:
        raise ConfigError("no windows to aggregate")
    if starts is None:
        if stride is None:
            raise ConfigError("need stride or starts")
        starts = [k * stride for k in range(len(windows))]
    total = n_frames if n_frames is not None else max(s + len(w) for s, w in zip(starts, windows))
    wsum = np.zeros(total)
    for s, w in zip(starts, windows):
        wsum[s:s + len(w)] += ramp_weights(len(w))
    if np.any(wsum == 0):
        gap = int(np.argmax(wsum == 0))
        raise EvaluationError(f"windows leave frame {gap} uncovered")
    out = np.zeros((total,) + np.shape(windows[0])[1:])
    for s, w in zip(starts, windows):
        wn = ramp_weights(len(w)) / wsum[s:s + len(w)]
        out[s:s + len(w)] += wn.reshape((-1,) + (1,) * (out.ndim - 1)) * w
    return out


def aggregation_weights(starts: list, window: int, n_frames: int) -> np.ndarray:
    """Normalised per-window weights ``[n_windows, n_frames]`` (for auditing)."""
    wsum = np.zeros(n_frames)
    for s in starts:
        wsum[s:s + window] += ramp_weights(window)
    out = np.zeros((len(starts), n_frames))
    for k, s in enumerate(starts):
        out[k, s:s + window] = ramp_weights(window) / wsum[s:s + window]
    return out


def generate_latents(store: ParamStore, cfg: ModelConfig, pose_feats: np.ndarray, protos: PrototypeStack,
                     scfg: SampleConfig, rng: np.random.Generator,
                     schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Sample a latent video window by window and blend the windows."""
    schedule = schedule or default_schedule()
    scfg.validate(schedule)
    n = pose_feats.shape[0]
    starts = window_starts(n, scfg.window, scfg.stride)
    bounds = latent_bounds(cfg.block_size, cfg.image_channels) if scfg.clip_x0 else None
    null = protos.zeros_like()
    outs = []
    for s in starts:
        sl = slice(s, min(s + scfg.window, n))
        pf = pose_feats[sl]
        cond, unc = protos.frames(sl), null.frames(sl)

        def model(x, t, conditional, pf=pf, cond=cond, unc=unc):
            return denoiser_forward(x, cond if conditional else unc, t, store, cfg, pose=pf)

        x_T = rng.standard_normal(pf.shape)
        outs.append(ddim_sample(model, x_T, schedule, scfg.ddim_steps, scfg.cfg_scale, x0_bounds=bounds,
                                quantile=scfg.threshold_quantile))
    return temporal_window_aggregate(outs, starts=starts, n_frames=n)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 500
    lr: float = 0.5
    momentum: float = 0.9
    lam: float = 0.1
    batch: int = 8
    clip_frames: int = 6
    ref_dropout: float = 0.1
    still_prob: float = 0.25
    grad_clip: float = 0.0

    def validate(self) -> "TrainConfig":
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.steps < 0 or self.batch < 1 or self.clip_frames < 1:
            raise ConfigError("steps, batch and clip_frames must be positive")
        if not 0 <= self.ref_dropout <= 1 or not 0 <= self.still_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        return self


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)      # raw total loss per step
    l_d: list = field(default_factory=list)
    l_o: list = field(default_factory=list)
    smoothed: list = field(default_factory=list)
    updated: list = field(default_factory=list)     # parameter names the stage may change


def trainable_names(store: ParamStore, stage: int) -> list:
    if stage == 1:
        return readout_param_names()
    return fta_param_names(store)


def smooth_curve(values, beta: float = 0.9) -> list:
    """Bias-corrected EMA followed by a running minimum (monotone non-increasing)."""
    out, ema, best = [], 0.0, np.inf
    for k, v in enumerate(values, start=1):
        ema = beta * ema + (1 - beta) * v
        best = min(best, ema / (1 - beta ** k))
        out.append(best)
    return out


def _fta_deltas(cache: ForwardCache, deltas: np.ndarray, cfg: ModelConfig):
    from .model import resize_flow
    orders = sorted(cache.offsets)
    return orders, [resize_flow(deltas, *cache.shapes[o]) for o in orders]


def stage1_batch(dataset: list, tcfg: TrainConfig, rng: np.random.Generator, schedule: NoiseSchedule):
    """Single target frames from random clips, each with its own timestep."""
    pick = [(int(rng.integers(len(dataset))), None) for _ in range(tcfg.batch)]
    pick = [(c, int(rng.integers(dataset[c].n_frames))) for c, _ in pick]
    x0 = np.stack([dataset[c].latents[f] for c, f in pick])
    pf = np.stack([dataset[c].pose_feats[f] for c, f in pick])
    stacks = []
    for c, f in pick:
        src = dataset[c].null_protos if rng.random() < tcfg.ref_dropout else dataset[c].protos
        stacks.append(src.frames(slice(f, f + 1)))
    t = rng.integers(0, schedule.T, size=tcfg.batch)
    eps = rng.standard_normal(x0.shape)
    return x0, pf, PrototypeStack.concat(stacks), t, eps, None


def stage2_batch(dataset: list, tcfg: TrainConfig, rng: np.random.Generator, schedule: NoiseSchedule):
    """A window of consecutive frames, or a still frame repeated (zero motion)."""
    c = dataset[int(rng.integers(len(dataset)))]
    n = min(tcfg.clip_frames, c.n_frames)
    if rng.random() < tcfg.still_prob:
        f = int(rng.integers(c.n_frames))
        idx = np.full(n, f)
        deltas = np.zeros((n,) + c.deltas.shape[1:])
    else:
        s = int(rng.integers(c.n_frames - n + 1))
        idx = np.arange(s, s + n)
        deltas = c.deltas[idx].copy()
        deltas[0] = 0.0               # the window's first frame has no predecessor inside the window
    protos = c.null_protos if rng.random() < tcfg.ref_dropout else c.protos
    t = int(rng.integers(0, schedule.T))
    eps = rng.standard_normal(c.latents[idx].shape)
    return c.latents[idx], c.pose_feats[idx], protos.frames(idx), t, eps, deltas


def train_toy(store: ParamStore, cfg: ModelConfig, dataset: list, tcfg: TrainConfig,
              rng: np.random.Generator, schedule: NoiseSchedule | None = None,
              log: Callable | None = None) -> TrainResult:
    """SGD with momentum on ``L_d + lam * L_o`` over the stage's trainable set.

    Stage 1 trains the output readout on single frames with FTA bypassed.
    Stage 2 trains the FTA parameters on short clips and repeated stills;
    everything else stays bit-identical.  ``store`` is updated in place.
    """
    tcfg.validate()
    schedule = schedule or default_schedule()
    names = trainable_names(store, tcfg.stage)
    velocity = {n: np.zeros_like(store[n]) for n in names}
    result = TrainResult(updated=list(names))
    for step in range(tcfg.steps):
        batch_fn = stage1_batch if tcfg.stage == 1 else stage2_batch
        x0, pf, protos, t, eps, deltas = batch_fn(dataset, tcfg, rng, schedule)
        x_t = add_noise(x0, eps, t, schedule)
        cache = ForwardCache()
        try:
            v_pred = denoiser_forward(x_t, protos, t, store, cfg, pose=pf, alpha_bar=schedule.alpha_bar_at(t),
                                      use_fta=tcfg.stage == 2, cache=cache)
        except EvaluationError as exc:
            raise EvaluationError(f"{exc} at step {step} (stage {tcfg.stage})") from exc
        v_tgt = v_target(x0, eps, t, schedule)
        l_d = loss_denoise(v_pred, v_tgt)
        grads: dict = {}
        l_o = 0.0
        if tcfg.stage == 1:
            grads.update(readout_backward(cache.readout_in, loss_denoise_grad(v_pred, v_tgt)))
        else:
            orders, targets = _fta_deltas(cache, deltas, cfg)
            l_o, g_o = loss_offset([cache.offsets[o] for o in orders], targets, with_grad=True)
            plan = block_plan(cfg)
            for o, g in zip(orders, g_o):
                p = f"den.{plan[o].name}.fta.offset"
                for k, v in offset_head_backward(cache.offset_cache[o], tcfg.lam * g, store, p).items():
                    grads[k] = v
        loss = total_loss(l_d, l_o, tcfg.lam)
        if not np.isfinite(loss):
            raise EvaluationError(f"non-finite loss {loss} at step {step} (stage {tcfg.stage})")
        if tcfg.lr != 0:
            for n in names:
                g = grads.get(n)
                if g is None:
                    continue
                if tcfg.grad_clip > 0:
                    norm = np.linalg.norm(g)
                    if norm > tcfg.grad_clip:
                        g = g * (tcfg.grad_clip / norm)
                velocity[n] = tcfg.momentum * velocity[n] + g
                store[n] = store[n] - tcfg.lr * velocity[n]
        result.losses.append(loss)
        result.l_d.append(l_d)
        result.l_o.append(l_o)
        if log is not None:
            log(step, loss, l_d, l_o)
    result.smoothed = smooth_curve(result.losses)
    return result


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PFCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Named-tensor container: header, JSON metadata, then (name, shape, little-endian doubles)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_b)) + meta_b)
    names = store.names()
    buf.write(struct.pack("<I", len(names)))
    for n in names:
        arr = np.ascontiguousarray(store[n], dtype="<f8")
        nb = n.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, store: ParamStore | None = None) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; with ``store`` given, copy tensors into it (shapes must match)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not a checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = take("<I")
    meta = json.loads(data[pos:pos + mlen].decode())
    pos += mlen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * size
        tensors[name] = arr
    if store is not None:
        missing = set(store.names()) - set(tensors)
        if missing:
            raise ConfigError(f"{path}: checkpoint lacks {sorted(missing)[:3]}...")
        for n, v in tensors.items():
            if n in store:
                store[n] = v
    return tensors, meta


def write_loss_csv(path, result: TrainResult) -> None:
    lines = ["step,loss,l_d,l_o,smoothed"]
    for k, (a, b, c, d) in enumerate(zip(result.losses, result.l_d, result.l_o, result.smoothed)):
        lines.append(f"{k},{a!r},{b!r},{c!r},{d!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

"""The denoiser: prototype-guided U-Net with flow-aligned temporal attention.

Block layout is down / mid / up with skip connections.  Every block runs
conv -> prototype spatial attention -> global cross-attention -> [FTA] ->
temporal attention.  FTA lives on the blocks listed by ``config.fta_range``.

Only two pieces carry hand-written gradients: the offset head (with the
bilinear sampler it drives) and the output readout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import Block, ModelConfig, block_plan, fta_range
from .numcore import (DTYPE, DimensionError, ParamStore, attend, bilinear_resize, bilinear_sample,
                      bilinear_sample_backward, conv2d, conv2d_backward, group_norm, init_attention, linear,
                      silu, silu_grad, sinusoidal_embedding, tokens, untokens)
from .ppa import PrototypeStack
from .refenc import conv_block, init_conv_block, semantic_cross_attention

DenoiserConfig = ModelConfig


# ---------------------------------------------------------------------------
# attention layers
# ---------------------------------------------------------------------------

def prototype_spatial_attention(z: np.ndarray, proto: np.ndarray, store: ParamStore, prefix: str,
                                heads: int) -> np.ndarray:
    """Latent tokens attend to ``[latent ; prototype]`` tokens (2*hw keys), residual add."""
    z = np.asarray(z, dtype=DTYPE)
    proto = np.asarray(proto, dtype=DTYPE)
    if z.shape != proto.shape:
        raise DimensionError(f"prototype {proto.shape} does not match latent {z.shape}")
    h, w = z.shape[-2:]
    t = tokens(z)
    ctx = np.concatenate([t, tokens(proto)], axis=-2)
    return untokens(t + attend(store, prefix, t, ctx, heads), h, w)


def semantic_cross_attention_global(z: np.ndarray, x_R: np.ndarray, store: ParamStore, prefix: str,
                                    heads: int) -> np.ndarray:
    return semantic_cross_attention(z, x_R, store, prefix, heads)


def predecessor_index(n_frames: int) -> np.ndarray:
    return np.maximum(np.arange(n_frames) - 1, 0)


def fta_query_concat(q: np.ndarray) -> np.ndarray:
    """``[N_f, C, h, w]`` -> ``[N_f, 2C, h, w]``: each frame next to its predecessor (frame 0 pairs with itself)."""
    q = np.asarray(q, dtype=DTYPE)
    return np.concatenate([q, q[predecessor_index(q.shape[0])]], axis=1)


def init_offset_head(store: ParamStore, prefix: str, channels: int, hidden: int) -> None:
    store.create(prefix + ".conv1.w", (hidden, 2 * channels, 3, 3), gain=np.sqrt(2.0))
    store.create(prefix + ".conv1.b", (hidden,), init="zeros")
    store.create(prefix + ".conv2.w", (2, hidden, 3, 3), init="zeros")
    store.create(prefix + ".conv2.b", (2,), init="zeros")


def predict_offsets(q_cat: np.ndarray, store: ParamStore, prefix: str, return_cache: bool = False):
    """Two 3x3 convs with SiLU between; ``[N_f, 2C, h, w]`` -> ``[N_f, 2, h, w]`` (dy, dx)."""
    a1 = conv2d(q_cat, store[prefix + ".conv1.w"], store[prefix + ".conv1.b"], padding=1)
    h1 = silu(a1)
    o = conv2d(h1, store[prefix + ".conv2.w"], store[prefix + ".conv2.b"], padding=1)
    if return_cache:
        return o, {"q_cat": q_cat, "a1": a1, "h1": h1}
    return o


def offset_head_backward(cache: dict, grad_o: np.ndarray, store: ParamStore, prefix: str) -> dict:
    """Parameter gradients of the offset head given ``dL/do``."""
    gh1, gw2, gb2 = conv2d_backward(cache["h1"], store[prefix + ".conv2.w"], grad_o, padding=1)
    ga1 = gh1 * silu_grad(cache["a1"])
    _, gw1, gb1 = conv2d_backward(cache["q_cat"], store[prefix + ".conv1.w"], ga1, padding=1)
    return {prefix + ".conv1.w": gw1, prefix + ".conv1.b": gb1,
            prefix + ".conv2.w": gw2, prefix + ".conv2.b": gb2}


def fta_resample(z_c: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Warp each frame's predecessor features by that frame's offsets."""
    prev = predecessor_index(z_c.shape[0])
    return np.stack([bilinear_sample(z_c[p], offsets[i]) for i, p in enumerate(prev)])


def fta_resample_backward(z_c: np.ndarray, offsets: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Gradient of :func:`fta_resample` wrt the offsets (features treated as constants)."""
    prev = predecessor_index(z_c.shape[0])
    return np.stack([bilinear_sample_backward(z_c[p], offsets[i], grad_u[i])[1] for i, p in enumerate(prev)])


def fta_attention(q: np.ndarray, u: np.ndarray, store: ParamStore, prefix: str, heads: int) -> np.ndarray:
    """Per-frame attention: frame queries over its resampled predecessor features; residual add."""
    h, w = q.shape[-2:]
    t = tokens(q)
    return untokens(t + attend(store, prefix, t, tokens(u), heads), h, w)


def temporal_attention(z: np.ndarray, store: ParamStore, prefix: str, heads: int) -> np.ndarray:
    """Attention across frames, independently at every spatial cell; frame codes enter q/k only."""
    n_f, c, h, w = z.shape
    t = z.reshape(n_f, c, h * w).transpose(2, 0, 1)              # [hw, N_f, C]
    pe = sinusoidal_embedding(np.arange(n_f), c)[None]
    out = t + attend(store, prefix, t, t, heads, qk_bias_q=pe, qk_bias_k=pe)
    return out.transpose(1, 2, 0).reshape(n_f, c, h, w)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def block_in_channels(cfg: ModelConfig, blk: Block) -> int:
    if blk.kind == "down":
        return cfg.latent_channels if blk.index == 0 else cfg.level_channels(blk.level - 1)
    if blk.kind == "mid":
        return cfg.level_channels(blk.level)
    prev_level = blk.level if blk.index == 0 else blk.level + 1
    return cfg.level_channels(prev_level) + cfg.level_channels(blk.level)


READOUT_PRIOR_VARS = (0.002, 0.01, 0.05, 0.25)


def readout_channels(cfg: ModelConfig) -> tuple[int, int]:
    """(dense input channels, number of gated latent maps)."""
    return cfg.level_channels(0) * 3, 2 * len(READOUT_PRIOR_VARS)


def init_denoiser(store: ParamStore, cfg: ModelConfig, prefix: str = "den") -> None:
    cfg.validate()
    store.create(prefix + ".time.w1", (cfg.d_time, cfg.d_time))
    store.create(prefix + ".time.b1", (cfg.d_time,), init="zeros")
    store.create(prefix + ".time.w2", (cfg.d_time, cfg.d_time))
    store.create(prefix + ".time.b2", (cfg.d_time,), init="zeros")
    for blk in block_plan(cfg):
        p = f"{prefix}.{blk.name}"
        c = cfg.level_channels(blk.level)
        init_conv_block(store, p, block_in_channels(cfg, blk), c)
        store.create(p + ".temb.w", (cfg.d_time, c))
        store.create(p + ".temb.b", (c,), init="zeros")
        init_attention(store, p + ".proto_attn", c)
        init_attention(store, p + ".global_attn", c, cfg.d_global)
        if blk.fta:
            init_offset_head(store, p + ".fta.offset", c, cfg.offset_hidden)
            init_attention(store, p + ".fta.attn", c)
            init_attention(store, p + ".fta.temporal", c, zero_out=True)
        else:
            init_attention(store, p + ".temporal", c, zero_out=True)
    n_dense, n_gated = readout_channels(cfg)
    store.create(prefix + ".readout.w", (n_dense, cfg.latent_channels), init="zeros")
    store.create(prefix + ".readout.skip", (n_gated, cfg.latent_channels), init="zeros")
    store.create(prefix + ".readout.b", (cfg.latent_channels,), init="zeros")


def fta_param_names(store: ParamStore, prefix: str = "den") -> list[str]:
    return [n for n in store.names(prefix) if ".fta." in n]


def offset_param_names(store: ParamStore, prefix: str = "den") -> list[str]:
    return [n for n in store.names(prefix) if ".fta.offset." in n]


def readout_param_names(prefix: str = "den") -> list[str]:
    return [prefix + ".readout.b", prefix + ".readout.skip", prefix + ".readout.w"]


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    readout_in: "ReadoutInputs | None" = None
    offsets: dict = field(default_factory=dict)               # block order -> [N_f, 2, h, w]
    offset_cache: dict = field(default_factory=dict)          # block order -> predict_offsets cache
    z_c: dict = field(default_factory=dict)                   # block order -> [N_f, C, h, w]
    shapes: dict = field(default_factory=dict)                # block order -> (h, w)


def time_embedding(t, store: ParamStore, cfg: ModelConfig, prefix: str = "den") -> np.ndarray:
    """``[N, d_time]`` embedding for a vector of timesteps."""
    e = sinusoidal_embedding(np.atleast_1d(np.asarray(t, dtype=DTYPE)), cfg.d_time)
    e = silu(linear(e, store[prefix + ".time.w1"], store[prefix + ".time.b1"]))
    return linear(e, store[prefix + ".time.w2"], store[prefix + ".time.b2"])


def readout_gates(alpha_bar, prior_var: float):
    """Posterior-mean gain ``sigma / (ab * prior_var + sigma^2)`` and the signal amplitude.

    If x0 ~ N(mu, prior_var) then E[v | x_t] = gain * (sqrt(ab) x_t - mu), so
    gating the input latent and the latent prototype by this gain lets a
    linear readout express that estimate at every noise level.
    """
    ab = np.asarray(alpha_bar, dtype=DTYPE)
    s2 = 1.0 - ab
    return np.sqrt(s2) / (ab * prior_var + s2), np.sqrt(ab)


@dataclass
class ReadoutInputs:
    dense: np.ndarray    # [N, F, h, w], mixed across channels by readout.w
    gated: np.ndarray    # [N, K, C_latent, h, w], scaled per channel by readout.skip


def readout_features(h: np.ndarray, x_t: np.ndarray, proto0: np.ndarray, alpha_bar,
                     groups: int, latent_proto: np.ndarray | None = None) -> ReadoutInputs:
    """Inputs of the output readout.

    The dense part holds the normalised final features, and those features
    and the level-0 prototype gated by the noise amplitude.  The gated part
    holds, for each prior width, the noisy latent and the latent-level
    prototype scaled by the posterior gain; these only ever meet their own
    channel, so the readout cannot tie itself to particular colours.  A
    missing latent prototype counts as zero.
    """
    n = h.shape[0]
    ab = np.broadcast_to(np.asarray(alpha_bar, dtype=DTYPE), (n,))[:, None, None, None]
    s = np.sqrt(1.0 - ab)
    hn = silu(group_norm(h, groups))
    pn = group_norm(proto0, groups)
    zr = np.zeros_like(x_t) if latent_proto is None else latent_proto
    gated = []
    for var in READOUT_PRIOR_VARS:
        g, a = readout_gates(ab, var)
        gated += [g * a * x_t, g * zr]
    return ReadoutInputs(np.concatenate([hn, s * hn, s * pn], axis=1), np.stack(gated, axis=1))


def apply_readout(feats: ReadoutInputs, store: ParamStore, prefix: str = "den") -> np.ndarray:
    w, k, b = store[prefix + ".readout.w"], store[prefix + ".readout.skip"], store[prefix + ".readout.b"]
    return (np.einsum("nfhw,fc->nchw", feats.dense, w) + np.einsum("nkchw,kc->nchw", feats.gated, k)
            + b[None, :, None, None])


def readout_backward(feats: ReadoutInputs, grad_out: np.ndarray, prefix: str = "den") -> dict:
    return {prefix + ".readout.w": np.einsum("nfhw,nchw->fc", feats.dense, grad_out),
            prefix + ".readout.skip": np.einsum("nkchw,nchw->kc", feats.gated, grad_out),
            prefix + ".readout.b": grad_out.sum(axis=(0, 2, 3))}


def _upsample_to(x: np.ndarray, h: int, w: int) -> np.ndarray:
    return x if x.shape[-2:] == (h, w) else bilinear_resize(x, h, w)


def denoiser_forward(x_t: np.ndarray, protos: PrototypeStack, t, store: ParamStore, cfg: ModelConfig,
                     pose: np.ndarray | None = None, alpha_bar=None, use_fta: bool = True,
                     cache: ForwardCache | None = None, prefix: str = "den") -> np.ndarray:
    """Predict v for a window of frames.

    ``x_t`` is the noisy latent ``[N_f, C_latent, h, w]``; the network input
    is ``x_t + pose`` (pose features, when given) while the readout also sees
    ``x_t`` alone.  ``protos.fine[level]`` is ``[N_f, C_level, h_level,
    w_level]`` and ``protos.glob`` is ``[N_f, d_g]``.  ``t`` is a scalar or one
    timestep per frame; ``alpha_bar`` defaults to the default schedule's value
    at ``t``.
    """
    x_t = np.asarray(x_t, dtype=DTYPE)
    if x_t.ndim != 4 or x_t.shape[1] != cfg.latent_channels:
        raise DimensionError(f"denoiser input {x_t.shape}: expected [N_f, {cfg.latent_channels}, h, w]")
    if pose is not None and np.shape(pose) != x_t.shape:
        raise DimensionError(f"pose features {np.shape(pose)} vs latent {x_t.shape}")
    z0 = x_t if pose is None else x_t + pose
    n_f = x_t.shape[0]
    if protos.glob.shape[0] != n_f or any(f.shape[0] != n_f for f in protos.fine):
        raise DimensionError("prototype stack and latent disagree on the number of frames")
    if alpha_bar is None:
        from .diffusion import default_schedule
        alpha_bar = default_schedule().alpha_bar_at(t)
    temb = np.broadcast_to(time_embedding(t, store, cfg, prefix), (n_f, cfg.d_time))
    skips: dict[int, np.ndarray] = {}
    x = z0
    for blk in block_plan(cfg):
        p = f"{prefix}.{blk.name}"
        if blk.kind == "up":
            skip = skips[blk.level]
            x = np.concatenate([_upsample_to(x, *skip.shape[-2:]), skip], axis=1)
        x = conv_block(x, store, p, blk.stride, cfg.gn_groups)
        x = x + linear(temb, store[p + ".temb.w"], store[p + ".temb.b"])[:, :, None, None]
        proto = protos.fine[blk.level]
        if proto.shape[1:] != x.shape[1:]:
            raise DimensionError(f"{blk.name}: prototype {proto.shape[1:]} vs latent {x.shape[1:]}")
        x = prototype_spatial_attention(x, proto, store, p + ".proto_attn", cfg.heads)
        x = semantic_cross_attention_global(x, protos.glob, store, p + ".global_attn", cfg.heads)
        if blk.fta:
            if use_fta:
                q_cat = fta_query_concat(x)
                o, oc = predict_offsets(q_cat, store, p + ".fta.offset", return_cache=True)
                u = fta_resample(x, o)
                if cache is not None:
                    cache.offsets[blk.order], cache.offset_cache[blk.order] = o, oc
                    cache.z_c[blk.order], cache.shapes[blk.order] = x, x.shape[-2:]
                x = fta_attention(x, u, store, p + ".fta.attn", cfg.heads)
            x = temporal_attention(x, store, p + ".fta.temporal", cfg.heads)
        else:
            x = temporal_attention(x, store, p + ".temporal", cfg.heads)
        if blk.kind == "down":
            skips[blk.level] = x
    feats = readout_features(x, x_t, protos.fine[0], alpha_bar, cfg.gn_groups, protos.latent)
    if cache is not None:
        cache.readout_in = feats
    return apply_readout(feats, store, prefix)


def describe_architecture(cfg: ModelConfig) -> list[dict]:
    rows = []
    for blk in block_plan(cfg):
        rows.append({"block": blk.name, "order": blk.order, "level": blk.level,
                     "channels": cfg.level_channels(blk.level), "fta": blk.fta})
    return rows


__all__ = [
    "DenoiserConfig", "ForwardCache", "apply_readout", "block_in_channels", "denoiser_forward",
    "describe_architecture", "fta_attention", "fta_param_names", "fta_query_concat", "fta_range", "fta_resample",
    "fta_resample_backward", "init_denoiser", "init_offset_head", "offset_head_backward", "offset_param_names",
    "predecessor_index", "predict_offsets", "prototype_spatial_attention", "readout_backward", "readout_features",
    "readout_param_names", "ReadoutInputs", "semantic_cross_attention_global", "temporal_attention",
]

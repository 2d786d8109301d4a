"""Reference side: latent codec, global encoder and the multi-scale reference encoder.

The codec is a lossless stand-in for a VAE (space-to-depth followed by a
fixed signed channel permutation) and the global encoder is a small
random-init conv net standing in for a CLIP image tower.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .numcore import (ConfigError, DTYPE, ParamStore, attend, conv2d, group_norm, init_attention, linear,
                      make_rng, silu, tokens, untokens)


# ---------------------------------------------------------------------------
# latent codec
# ---------------------------------------------------------------------------

def _mixer(channels: int) -> tuple[np.ndarray, np.ndarray]:
    rng = make_rng([channels, 8])
    perm = rng.permutation(channels)
    sign = np.where(np.arange(channels) % 2 == 0, 1.0, -1.0)
    return perm, sign


def encode_latent(image: np.ndarray, block: int = 8) -> np.ndarray:
    """``[H, W, C]`` (or ``[N, H, W, C]``) image to ``[C*b*b, H/b, W/b]`` latent."""
    img = np.asarray(image, dtype=DTYPE)
    single = img.ndim == 3
    img = img[None] if single else img
    n, h, w, c = img.shape
    if h % block or w % block:
        raise ConfigError(f"image {h}x{w} not divisible by block size {block}")
    x = img.reshape(n, h // block, block, w // block, block, c)
    x = x.transpose(0, 5, 2, 4, 1, 3).reshape(n, c * block * block, h // block, w // block)
    perm, sign = _mixer(x.shape[1])
    x = x[:, perm] * sign[None, :, None, None]
    return x[0] if single else x


def latent_bounds(block: int = 8, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(low, high)`` of latents of images in [0, 1], shaped ``[C, 1, 1]``."""
    _, sign = _mixer(channels * block * block)
    lo = np.where(sign > 0, 0.0, -1.0)[:, None, None]
    return lo, lo + 1.0


def decode_latent(latent: np.ndarray, block: int = 8, channels: int = 3) -> np.ndarray:
    z = np.asarray(latent, dtype=DTYPE)
    single = z.ndim == 3
    z = z[None] if single else z
    n, cz, hb, wb = z.shape
    if cz != channels * block * block:
        raise ConfigError(f"latent has {cz} channels, expected {channels * block * block}")
    perm, sign = _mixer(cz)
    x = np.empty_like(z)
    x[:, perm] = z * sign[None, :, None, None]
    x = x.reshape(n, channels, block, block, hb, wb).transpose(0, 4, 2, 5, 3, 1)
    img = x.reshape(n, hb * block, wb * block, channels)
    return img[0] if single else img


# ---------------------------------------------------------------------------
# global encoder
# ---------------------------------------------------------------------------

def init_global_encoder(store: ParamStore, cfg: ModelConfig, prefix: str = "global_enc") -> None:
    chans = (cfg.image_channels,) + tuple(cfg.global_widths)
    for i in range(3):
        store.create(f"{prefix}.conv{i}.w", (chans[i + 1], chans[i], 3, 3), gain=np.sqrt(2.0))
        store.create(f"{prefix}.conv{i}.b", (chans[i + 1],), init="zeros")
    store.create(f"{prefix}.proj.w", (chans[-1], cfg.d_global))
    store.create(f"{prefix}.proj.b", (cfg.d_global,), init="zeros")


def encode_global(image: np.ndarray, store: ParamStore, prefix: str = "global_enc") -> np.ndarray:
    """Pooled image descriptor ``[d_g]`` (or ``[N, d_g]`` for a batch)."""
    x = np.asarray(image, dtype=DTYPE)
    single = x.ndim == 3
    x = np.moveaxis(x[None] if single else x, -1, 1)
    for i in range(3):
        x = silu(conv2d(x, store[f"{prefix}.conv{i}.w"], store[f"{prefix}.conv{i}.b"], stride=2, padding=1))
    pooled = x.mean(axis=(2, 3))
    out = linear(pooled, store[f"{prefix}.proj.w"], store[f"{prefix}.proj.b"])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# attention layers shared with the denoiser
# ---------------------------------------------------------------------------

def spatial_self_attention(z: np.ndarray, store: ParamStore, prefix: str, heads: int) -> np.ndarray:
    """Self-attention over the spatial cells of ``[..., C, h, w]`` with a residual."""
    h, w = z.shape[-2:]
    t = tokens(z)
    return untokens(t + attend(store, prefix, t, t, heads), h, w)


def semantic_cross_attention(z: np.ndarray, g: np.ndarray, store: ParamStore, prefix: str, heads: int) -> np.ndarray:
    """Spatial tokens attend to one global token ``g`` (``[d_g]`` or ``[..., d_g]``)."""
    h, w = z.shape[-2:]
    t = tokens(z)
    ctx = np.asarray(g, dtype=DTYPE)[..., None, :]
    ctx = np.broadcast_to(ctx, t.shape[:-2] + ctx.shape[-2:])
    return untokens(t + attend(store, prefix, t, ctx, heads), h, w)


def init_conv_block(store: ParamStore, prefix: str, cin: int, cout: int) -> None:
    store.create(prefix + ".conv.w", (cout, cin, 3, 3), gain=np.sqrt(2.0))
    store.create(prefix + ".conv.b", (cout,), init="zeros")
    store.create(prefix + ".gn.g", (cout,), init="ones")
    store.create(prefix + ".gn.b", (cout,), init="zeros")


def conv_block(x: np.ndarray, store: ParamStore, prefix: str, stride: int, groups: int) -> np.ndarray:
    y = conv2d(x, store[prefix + ".conv.w"], store[prefix + ".conv.b"], stride=stride, padding=1)
    return silu(group_norm(y, groups, store[prefix + ".gn.g"], store[prefix + ".gn.b"]))


# ---------------------------------------------------------------------------
# reference encoder
# ---------------------------------------------------------------------------

def init_reference_encoder(store: ParamStore, cfg: ModelConfig, prefix: str = "ref") -> None:
    cin = cfg.latent_channels
    for j in range(cfg.n_levels):
        c = cfg.level_channels(j)
        init_conv_block(store, f"{prefix}.block{j}", cin, c)
        init_attention(store, f"{prefix}.block{j}.self_attn", c)
        init_attention(store, f"{prefix}.block{j}.cross_attn", c, cfg.d_global)
        cin = c


def reference_forward(z_r: np.ndarray, x_r: np.ndarray, store: ParamStore, cfg: ModelConfig,
                      prefix: str = "ref") -> list[np.ndarray]:
    """Multi-scale reference features.

    ``z_r`` is ``[N_r, C_latent, h, w]`` and ``x_r`` is ``[N_r, d_g]``.
    Returns one ``[N_r, C_j, h_j, w_j]`` array per block; references never
    interact.
    """
    z = np.asarray(z_r, dtype=DTYPE)
    g = np.asarray(x_r, dtype=DTYPE)
    if z.ndim != 4 or g.ndim != 2 or z.shape[0] != g.shape[0]:
        raise ConfigError(f"reference_forward: got latents {z.shape} and globals {g.shape}")
    pyramid = []
    for j in range(cfg.n_levels):
        z = conv_block(z, store, f"{prefix}.block{j}", 1 if j == 0 else 2, cfg.gn_groups)
        z = spatial_self_attention(z, store, f"{prefix}.block{j}.self_attn", cfg.heads)
        z = semantic_cross_attention(z, g, store, f"{prefix}.block{j}.cross_attn", cfg.heads)
        pyramid.append(z)
    return pyramid

"""Pose-aware prototype aggregation.

A selector compares each driving-pose feature map with the reference pose
feature maps and produces per-reference weight maps; those weights fold the
reference pyramid and the global reference descriptors into per-frame
prototypes shaped like a single reference's features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numcore import (DTYPE, ConfigError, DimensionError, ParamStore, bilinear_resize, group_norm, linear,
                      sinusoidal_pos_enc, softmax, tokens)

FULL_ATTENTION_LIMIT = 2 ** 24


@dataclass
class AggregationMap:
    m: np.ndarray        # [N_f, N_r, h, w], sums to 1 over N_r at every cell
    m_s: np.ndarray      # [N_f, N_r], sums to 1
    m_raw: np.ndarray    # [N_f, N_r, h, w], query-pooled attention before renormalisation
    attn: np.ndarray | None = None  # [N_f, hw, N_r*hw] when requested

    def resized(self, h: int, w: int) -> np.ndarray:
        """Per-block copy of ``m``, renormalised so the reference weights stay convex."""
        mj = bilinear_resize(self.m, h, w)
        return mj / mj.sum(axis=1, keepdims=True)


@dataclass
class PrototypeStack:
    fine: list           # per level: [N_f, C_j, h_j, w_j]
    glob: np.ndarray     # [N_f, d_g]
    maps: AggregationMap | None = None
    latent: np.ndarray | None = None   # [N_f, C_latent, h, w], aggregated reference latents

    def zeros_like(self) -> "PrototypeStack":
        lat = None if self.latent is None else np.zeros_like(self.latent)
        return PrototypeStack([np.zeros_like(f) for f in self.fine], np.zeros_like(self.glob), self.maps, lat)

    def frames(self, idx) -> "PrototypeStack":
        lat = None if self.latent is None else self.latent[idx]
        return PrototypeStack([f[idx] for f in self.fine], self.glob[idx], self.maps, lat)

    @staticmethod
    def concat(stacks: list) -> "PrototypeStack":
        fine = [np.concatenate([s.fine[j] for s in stacks]) for j in range(len(stacks[0].fine))]
        lat = None if stacks[0].latent is None else np.concatenate([s.latent for s in stacks])
        return PrototypeStack(fine, np.concatenate([s.glob for s in stacks]), None, lat)


def init_selector(store: ParamStore, channels: int, prefix: str = "ppa") -> None:
    # identity projections: the untrained selector scores raw pose-feature similarity
    for role in ("q", "k"):
        store.create(f"{prefix}.{role}.gn.g", (channels,), init="ones")
        store.create(f"{prefix}.{role}.gn.b", (channels,), init="zeros")
        store.create(f"{prefix}.{role}.w", (channels, channels), init="identity")
        store.create(f"{prefix}.{role}.b", (channels,), init="zeros")


def _project(x: np.ndarray, store: ParamStore, prefix: str, role: str, groups: int) -> np.ndarray:
    h, w = x.shape[-2:]
    pe = sinusoidal_pos_enc(h, w, x.shape[-3])
    y = group_norm(x + pe, groups, store[f"{prefix}.{role}.gn.g"], store[f"{prefix}.{role}.gn.b"])
    return linear(tokens(y), store[f"{prefix}.{role}.w"], store[f"{prefix}.{role}.b"])


def selector_attention(x_p: np.ndarray, x_rp: np.ndarray, store: ParamStore, groups: int,
                       prefix: str = "ppa") -> np.ndarray:
    """Softmax attention ``[N_f, hw, N_r*hw]`` of driving-pose queries over reference-pose keys."""
    x_p = np.asarray(x_p, dtype=DTYPE)
    x_rp = np.asarray(x_rp, dtype=DTYPE)
    if x_p.ndim == 3:
        x_p = x_p[None]
    if x_rp.ndim != 4 or x_p.shape[1:] != x_rp.shape[1:]:
        raise DimensionError(f"selector: driving {x_p.shape[1:]} vs reference {x_rp.shape[1:]}")
    q = _project(x_p, store, prefix, "q", groups)                 # [N_f, hw, d]
    k = _project(x_rp, store, prefix, "k", groups)                # [N_r, hw, d]
    k = k.reshape(-1, k.shape[-1])                                # [N_r*hw, d]
    d = q.shape[-1]
    return softmax(q @ k.T / np.sqrt(d), axis=-1)


def pose_aware_selector(x_p: np.ndarray, x_rp: np.ndarray, store: ParamStore, groups: int = 8,
                        prefix: str = "ppa", keep_attention: bool = False) -> AggregationMap:
    """Per-frame reference weight maps from pose similarity.

    Attention of every driving cell over all reference cells is averaged over
    the driving cells, giving one weight per (reference, cell).  Those raw
    weights are then normalised across references at each cell, and their
    spatial means give the global scores.
    """
    attn = selector_attention(x_p, x_rp, store, groups, prefix)
    n_r = x_rp.shape[0]
    h, w = x_rp.shape[-2:]
    m_raw = attn.mean(axis=1).reshape(-1, n_r, h, w)
    m = m_raw / m_raw.sum(axis=1, keepdims=True)
    m_s = m.mean(axis=(2, 3))
    m_s = m_s / m_s.sum(axis=1, keepdims=True)
    return AggregationMap(m, m_s, m_raw, attn if keep_attention else None)


def aggregate_fine(maps: AggregationMap, level_feats: np.ndarray) -> np.ndarray:
    """Weighted sum over references: ``[N_r, C, h, w]`` -> ``[N_f, C, h, w]``."""
    h, w = level_feats.shape[-2:]
    mj = maps.resized(h, w)                                       # [N_f, N_r, h, w]
    return np.einsum("frhw,rchw->fchw", mj, level_feats) if mj.shape[1] > 1 else mj[:, 0, None] * level_feats[0]


def aggregate_global(maps: AggregationMap, x_r: np.ndarray) -> np.ndarray:
    """Score-weighted sum of global descriptors: ``[N_r, d]`` -> ``[N_f, d]``."""
    return maps.m_s @ np.asarray(x_r, dtype=DTYPE) if maps.m_s.shape[1] > 1 else maps.m_s[:, :1] * x_r[0]


def build_prototypes(x_p: np.ndarray, x_rp: np.ndarray, pyramid: list, x_r: np.ndarray, store: ParamStore,
                     groups: int = 8, prefix: str = "ppa", z_r: np.ndarray | None = None) -> PrototypeStack:
    """Fine and global prototypes for every driving frame.

    When the reference latents ``z_r`` are given they are aggregated with the
    same maps and kept as the finest prototype level.
    """
    maps = pose_aware_selector(x_p, x_rp, store, groups, prefix)
    fine = [aggregate_fine(maps, lvl) for lvl in pyramid]
    lat = None if z_r is None else aggregate_fine(maps, np.asarray(z_r, dtype=DTYPE))
    return PrototypeStack(fine, aggregate_global(maps, x_r), maps, lat)


def full_attention_aggregate(x_p: np.ndarray, x_rp: np.ndarray, pyramid: list, x_r: np.ndarray,
                             store: ParamStore, groups: int = 8, prefix: str = "ppa") -> PrototypeStack:
    """Ablation variant without query pooling.

    Each driving cell keeps its own attention row over all reference cells;
    the row (resized to each block's grid on both the query and key side and
    renormalised) mixes the reference features directly.
    """
    x_rp = np.asarray(x_rp, dtype=DTYPE)
    n_r = x_rp.shape[0]
    h, w = x_rp.shape[-2:]
    if n_r * (h * w) ** 2 > FULL_ATTENTION_LIMIT:
        raise ConfigError(f"full attention over {n_r}x{h * w}x{h * w} cells exceeds the memory guard")
    attn = selector_attention(x_p, x_rp, store, groups, prefix)   # [N_f, hw, N_r*hw]
    n_f = attn.shape[0]
    a = attn.reshape(n_f, h, w, n_r, h, w)
    fine = []
    for lvl in pyramid:
        hj, wj = lvl.shape[-2:]
        # key side: [.., N_r, h, w] -> [.., N_r, hj, wj]; query side likewise
        ak = bilinear_resize(a, hj, wj)                                      # [N_f, h, w, N_r, hj, wj]
        aq = bilinear_resize(np.moveaxis(ak, (1, 2), (-2, -1)), hj, wj)      # [N_f, N_r, hj, wj, hj, wj]
        aq = aq / aq.sum(axis=(1, 2, 3), keepdims=True)
        fine.append(np.einsum("frklpq,rckl->fcpq", aq, lvl))
    mass = attn.reshape(n_f, -1, n_r, h * w).sum(axis=-1).mean(axis=1)      # [N_f, N_r]
    m_raw = attn.mean(axis=1).reshape(n_f, n_r, h, w)
    maps = AggregationMap(m_raw / m_raw.sum(axis=1, keepdims=True), mass / mass.sum(axis=1, keepdims=True), m_raw)
    return PrototypeStack(fine, maps.m_s @ np.asarray(x_r, dtype=DTYPE), maps)


def scores_report(m_s: np.ndarray, frame_labels=None) -> str:
    """Per-frame global scores as canonical JSON text."""
    rows = []
    for i, row in enumerate(np.asarray(m_s)):
        entry = {"frame": i, "scores": [float(v) for v in row]}
        if frame_labels is not None:
            entry["view"] = str(getattr(frame_labels[i], "value", frame_labels[i]))
        rows.append(entry)
    return json.dumps({"m_s": rows}, indent=1, sort_keys=True) + "\n"

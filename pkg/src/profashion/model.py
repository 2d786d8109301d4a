"""Whole-model glue: parameter init and per-clip conditioning.

Everything upstream of the denoiser (codec, global encoder, reference
encoder, pose encoder, selector) is frozen at its seeded init, so the
conditioning of a clip can be computed once and reused across training
steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .numcore import DTYPE, ParamStore, bilinear_resize
from .poseflow import encode_pose, init_pose_encoder, predecessor_flows
from .ppa import PrototypeStack, build_prototypes, init_selector
from .refenc import (encode_global, encode_latent, init_global_encoder, init_reference_encoder,
                     reference_forward)
from .fpi import init_denoiser
from .synthworld import SceneClip, render_pose_map


def init_model(cfg: ModelConfig, seed: int) -> ParamStore:
    cfg.validate()
    store = ParamStore(seed)
    init_pose_encoder(store, cfg.latent_channels, cfg.pose_widths)
    init_global_encoder(store, cfg)
    init_reference_encoder(store, cfg)
    init_selector(store, cfg.latent_channels)
    init_denoiser(store, cfg)
    return store


@dataclass
class ClipConditioning:
    latents: np.ndarray        # [N, C_lat, h, w] ground-truth frame latents
    pose_feats: np.ndarray     # [N, C_lat, h, w]
    protos: PrototypeStack     # per frame
    deltas: np.ndarray         # [N, 2, H, W] flow from each frame to its predecessor (pixels)
    ref_indices: list
    null_protos: PrototypeStack

    @property
    def n_frames(self) -> int:
        return self.latents.shape[0]


def pose_maps(clip: SceneClip) -> np.ndarray:
    return np.stack([render_pose_map(k, clip.resolution) for k in clip.keypoints])


def reference_conditioning(ref_images: np.ndarray, ref_poses: np.ndarray, store: ParamStore, cfg: ModelConfig):
    """Latents, pyramid, global descriptors and pose features of a reference set."""
    z_r = encode_latent(ref_images, cfg.block_size)
    x_r = encode_global(ref_images, store)
    pyramid = reference_forward(z_r, x_r, store, cfg)
    x_rp = encode_pose(ref_poses, store)
    return z_r, pyramid, x_r, x_rp


def condition_clip(clip: SceneClip, ref_indices, store: ParamStore, cfg: ModelConfig,
                   exact_flow: bool = False, ref_clip: SceneClip | None = None) -> ClipConditioning:
    """Conditioning for every frame of ``clip`` using frames ``ref_indices`` of
    ``ref_clip`` (default: the clip itself) as references."""
    ref_clip = clip if ref_clip is None else ref_clip
    ref_indices = list(ref_indices)
    maps = pose_maps(clip)
    ref_maps = maps[ref_indices] if ref_clip is clip else pose_maps(ref_clip)[ref_indices]
    z_r, pyramid, x_r, x_rp = reference_conditioning(ref_clip.frames[ref_indices], ref_maps, store, cfg)
    x_p = encode_pose(maps, store)
    protos = build_prototypes(x_p, x_rp, pyramid, x_r, store, cfg.selector_groups, z_r=z_r)
    deltas = predecessor_flows(maps, clip.keypoints, exact=exact_flow)
    return ClipConditioning(encode_latent(clip.frames, cfg.block_size), x_p, protos, deltas, ref_indices,
                            protos.zeros_like())


def resize_flow(delta: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bring a sparse ``[..., 2, H, W]`` pixel flow to an ``h x w`` grid in grid units.

    For integer reduction factors each target cell takes the mean of the
    non-zero source vectors inside it (plain bilinear resizing would mostly
    miss the small keypoint discs); otherwise bilinear resizing is used.
    Vectors are rescaled by the resolution ratio.
    """
    delta = np.asarray(delta, dtype=DTYPE)
    H, W = delta.shape[-2:]
    scale = np.array([h / H, w / W]).reshape((2, 1, 1))
    if H % h == 0 and W % w == 0:
        fy, fx = H // h, W // w
        lead = delta.shape[:-2]
        blocks = delta.reshape(lead + (h, fy, w, fx))
        nz = (np.abs(delta).sum(axis=-3, keepdims=True) > 0).astype(DTYPE)
        nz = np.broadcast_to(nz, delta.shape).reshape(lead + (h, fy, w, fx))
        num = blocks.sum(axis=(-3, -1))
        cnt = nz.sum(axis=(-3, -1))
        out = np.where(cnt > 0, num / np.maximum(cnt, 1), 0.0)
    else:
        out = bilinear_resize(delta, h, w)
    return out * scale

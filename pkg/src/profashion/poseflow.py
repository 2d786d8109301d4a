"""Pose encoder, Farneback optical flow, keypoint flow maps and reference selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (ConfigError, DTYPE, ParamStore, bilinear_resize, bilinear_sample, conv2d, silu)
from .synthworld import SceneClip, ViewLabel, label_view

VIEW_ORDER = (ViewLabel.FRONT, ViewLabel.BACK, ViewLabel.SIDE)


# ---------------------------------------------------------------------------
# pose encoder
# ---------------------------------------------------------------------------

def init_pose_encoder(store: ParamStore, out_channels: int, widths=(16, 32, 64), prefix: str = "pose_enc",
                      out_gain: float = 16.0) -> None:
    # skeleton maps are mostly black, so fan-in scaling alone leaves the output
    # far below unit scale; out_gain lifts it to roughly unit std
    chans = (3,) + tuple(widths) + (out_channels,)
    for i in range(4):
        cin, cout = chans[i], chans[i + 1]
        store.create(f"{prefix}.conv{i}.w", (cout, cin, 3, 3), gain=out_gain if i == 3 else np.sqrt(2.0))
        store.create(f"{prefix}.conv{i}.b", (cout,), init="zeros")


def encode_pose(pose_map: np.ndarray, store: ParamStore, prefix: str = "pose_enc") -> np.ndarray:
    """Encode rendered pose maps to features at 1/8 resolution.

    Accepts ``[H, W, 3]`` images or a batch ``[N, H, W, 3]``; returns
    ``[C, H/8, W/8]`` (or ``[N, C, H/8, W/8]``).
    """
    x = np.asarray(pose_map, dtype=DTYPE)
    single = x.ndim == 3
    x = np.moveaxis(x[None] if single else x, -1, 1)
    for i in range(4):
        stride = 2 if i < 3 else 1
        x = conv2d(x, store[f"{prefix}.conv{i}.w"], store[f"{prefix}.conv{i}.b"], stride=stride, padding=1)
        if i < 3:
            x = silu(x)
    return x[0] if single else x


# ---------------------------------------------------------------------------
# Farneback flow
# ---------------------------------------------------------------------------

def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=DTYPE)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def _gauss1d(sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=DTYPE)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _correlate_edge(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D correlation of ``[..., H, W]`` with replicate borders."""
    kh, kw = kernel.shape
    pad = [(0, 0)] * (img.ndim - 2) + [(kh // 2, kh // 2), (kw // 2, kw // 2)]
    padded = np.pad(img, pad, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, kernel.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, kernel)


def _separable_blur(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _correlate_edge(_correlate_edge(img, g[None, :]), g[:, None])


def poly_expansion_kernels(n: int, sigma: float) -> np.ndarray:
    """Filters mapping a neighbourhood to (c, bx, by, axx, ayy, axy).

    Weighted least squares of the quadratic ``c + bx x + by y + axx x^2 +
    ayy y^2 + axy xy`` against the pixels of a ``(2n+1)^2`` window, weighted by
    a Gaussian of width ``sigma``.  Returns ``[6, 2n+1, 2n+1]``.
    """
    t = np.arange(-n, n + 1, dtype=DTYPE)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    w = np.exp(-0.5 * (xx ** 2 + yy ** 2) / sigma ** 2).ravel()
    basis = np.stack([np.ones_like(xx), xx, yy, xx ** 2, yy ** 2, xx * yy], axis=-1).reshape(-1, 6)
    gram = basis.T @ (basis * w[:, None])
    proj = np.linalg.solve(gram, (basis * w[:, None]).T)
    return proj.reshape(6, 2 * n + 1, 2 * n + 1)


def poly_expansion(img: np.ndarray, n: int = 5, sigma: float = 1.1) -> np.ndarray:
    kernels = poly_expansion_kernels(n, sigma)
    return np.stack([_correlate_edge(img, k) for k in kernels])


def _flow_update(r1: np.ndarray, r2: np.ndarray, flow: np.ndarray, window_g: np.ndarray) -> np.ndarray:
    """One displacement re-estimation given expansions of both frames."""
    r2w = bilinear_sample(r2, flow)
    # A = (A1 + A2(x + d)) / 2 with entries [[axx, axy/2], [axy/2, ayy]] over (x, y)
    axx = (r1[3] + r2w[3]) / 2
    ayy = (r1[4] + r2w[4]) / 2
    axy = (r1[5] + r2w[5]) / 4
    dx, dy = flow[1], flow[0]
    bx = -0.5 * (r2w[1] - r1[1]) + axx * dx + axy * dy
    by = -0.5 * (r2w[2] - r1[2]) + axy * dx + ayy * dy
    g11 = axx * axx + axy * axy
    g12 = axx * axy + axy * ayy
    g22 = axy * axy + ayy * ayy
    h1 = axx * bx + axy * by
    h2 = axy * bx + ayy * by
    g11, g12, g22, h1, h2 = (_separable_blur(m, window_g) for m in (g11, g12, g22, h1, h2))
    # weak-texture cells fall back to the prior displacement instead of zero
    reg = 1e-3 * (g11 + g22).max() + 1e-12
    g11 = g11 + reg
    g22 = g22 + reg
    h1 = h1 + reg * dx
    h2 = h2 + reg * dy
    det = g11 * g22 - g12 * g12
    new_dx = (g22 * h1 - g12 * h2) / det
    new_dy = (g11 * h2 - g12 * h1) / det
    return np.stack([new_dy, new_dx])


def farneback_flow(img_a: np.ndarray, img_b: np.ndarray, levels: int = 3, window: int = 9,
                   iterations: int = 3, poly_n: int = 5, poly_sigma: float = 1.1,
                   pyr_scale: float = 0.5) -> np.ndarray:
    """Dense two-frame flow ``[2, H, W]`` (dy, dx) from ``img_a`` to ``img_b``.

    Quadratic polynomial expansion per pixel, Gaussian-weighted neighbourhood
    aggregation of the displacement constraints, and a coarse-to-fine pyramid
    with ``iterations`` fixed-point refinements per level.
    """
    a = to_gray(img_a)
    b = to_gray(img_b)
    if a.shape != b.shape:
        raise ConfigError(f"farneback_flow: shapes {a.shape} and {b.shape} differ")
    if min(a.shape) < window:
        raise ConfigError(f"farneback_flow: image {a.shape} smaller than window {window}")
    if np.array_equal(a, b):
        return np.zeros((2,) + a.shape)

    window_g = _gauss1d(max(window / 4.0, 0.5), window // 2)
    pyramid = [(a, b)]
    for _ in range(1, levels):
        pa, pb = pyramid[-1]
        h = int(round(pa.shape[0] * pyr_scale))
        w = int(round(pa.shape[1] * pyr_scale))
        if min(h, w) < max(window // 2, 2 * poly_n + 1) // 2 + 1:
            break
        blur = _gauss1d(1.0 / pyr_scale * 0.5, 2)
        pyramid.append((bilinear_resize(_separable_blur(pa, blur), h, w),
                        bilinear_resize(_separable_blur(pb, blur), h, w)))

    flow = None
    for la, lb in reversed(pyramid):
        if flow is None:
            flow = np.zeros((2,) + la.shape)
        else:
            sy = la.shape[0] / flow.shape[1]
            sx = la.shape[1] / flow.shape[2]
            flow = bilinear_resize(flow, *la.shape)
            flow[0] *= sy
            flow[1] *= sx
        r1 = poly_expansion(la, poly_n, poly_sigma)
        r2 = poly_expansion(lb, poly_n, poly_sigma)
        for _ in range(iterations):
            flow = _flow_update(r1, r2, flow, window_g)
    return flow


# ---------------------------------------------------------------------------
# keypoint flow maps
# ---------------------------------------------------------------------------

def keypoint_discs(keypoints: np.ndarray, shape, radius: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Mask of pixels within ``radius`` of any keypoint and the nearest keypoint index."""
    h, w = shape
    py, px = np.mgrid[0:h, 0:w].astype(DTYPE)
    kp = np.asarray(keypoints, dtype=DTYPE).reshape(-1, 2)
    if len(kp) == 0:
        return np.zeros(shape, dtype=bool), np.zeros(shape, dtype=int)
    dist = np.hypot(py[None] - kp[:, 0, None, None], px[None] - kp[:, 1, None, None])
    nearest = np.argmin(dist, axis=0)
    return dist.min(axis=0) <= radius, nearest


def keypoint_flow_map(pose_a: np.ndarray, pose_b: np.ndarray, keypoints_a: np.ndarray,
                      radius: float = 3.0, **flow_kw) -> np.ndarray:
    """Farneback flow between two rendered pose maps, kept only in keypoint discs."""
    flow = farneback_flow(pose_a, pose_b, **flow_kw)
    mask, _ = keypoint_discs(keypoints_a, flow.shape[1:], radius)
    return flow * mask


def exact_keypoint_flow(keypoints_a: np.ndarray, keypoints_b: np.ndarray, resolution: int,
                        radius: float = 3.0) -> np.ndarray:
    """Splat each keypoint's true displacement into its disc (nearest keypoint wins)."""
    kp_a = np.asarray(keypoints_a, dtype=DTYPE).reshape(-1, 2)
    kp_b = np.asarray(keypoints_b, dtype=DTYPE).reshape(-1, 2)
    shape = (resolution, resolution)
    mask, nearest = keypoint_discs(kp_a, shape, radius)
    out = np.zeros((2,) + shape)
    if len(kp_a):
        disp = kp_b - kp_a
        out[0] = np.where(mask, disp[nearest, 0], 0.0)
        out[1] = np.where(mask, disp[nearest, 1], 0.0)
    return out


def predecessor_flows(pose_maps: np.ndarray, keypoints: np.ndarray, radius: float = 3.0,
                      exact: bool = False) -> np.ndarray:
    """Keypoint flow from every frame to its predecessor, ``[N, 2, H, W]``.

    Frame 0 has no predecessor and gets a zero map.  These maps supervise the
    offsets that resample the previous frame onto the current one.
    """
    n = len(pose_maps)
    h, w = pose_maps.shape[1:3]
    out = np.zeros((n, 2, h, w))
    for i in range(1, n):
        if exact:
            out[i] = exact_keypoint_flow(keypoints[i], keypoints[i - 1], h, radius)
        else:
            out[i] = keypoint_flow_map(pose_maps[i], pose_maps[i - 1], keypoints[i], radius)
    return out


# ---------------------------------------------------------------------------
# reference selection
# ---------------------------------------------------------------------------

@dataclass
class SelectionReport:
    indices: list
    labels: list
    warnings: list = field(default_factory=list)


def select_references(clip: SceneClip | list, n_refs: int = 3, rng: np.random.Generator | None = None) -> SelectionReport:
    """Pick one frame per orientation group (front, back, side).

    ``clip`` is a :class:`SceneClip` or a precomputed list of view labels.
    With ``n_refs`` < 3 the groups are taken in that order.  A missing group
    is filled from the largest group (without repeating frames when
    possible) and reported in ``warnings``.
    """
    if rng is None:
        raise ConfigError("select_references needs an rng")
    labels = clip if isinstance(clip, list) else [label_view(k) for k in clip.keypoints]
    groups = {v: [i for i, lbl in enumerate(labels) if lbl == v] for v in VIEW_ORDER}
    wanted = [VIEW_ORDER[i % len(VIEW_ORDER)] for i in range(n_refs)]
    chosen, warnings = [], []
    for view in wanted:
        pool = [i for i in groups[view] if i not in chosen]
        if not pool:
            largest = max(VIEW_ORDER, key=lambda v: (len(groups[v]), -VIEW_ORDER.index(v)))
            pool = [i for i in groups[largest] if i not in chosen] or groups[largest]
            warnings.append(f"no '{view.value}' frame available; used a '{largest.value}' frame instead")
        chosen.append(int(pool[int(rng.integers(len(pool)))]))
    return SelectionReport(chosen, [labels[i] for i in chosen], warnings)

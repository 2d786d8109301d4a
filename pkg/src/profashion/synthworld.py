"""Procedural turning-character clips with view-dependent garment patterns.

The character is a flat torso panel (front face and back face carry
different 8x8 colour-block textures), a head disc, and stick limbs.  It spins
about the vertical image axis and is drawn with an orthographic camera, so
every pixel's motion between frames is known in closed form.

Coordinates: keypoints and flows are stored as ``(y, x)`` in pixels with the
origin at the centre of the top-left pixel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numcore import ConfigError, DTYPE, make_rng

JOINTS = ("head", "l_shoulder", "r_shoulder", "l_hip", "r_hip", "l_hand", "r_hand", "l_foot", "r_foot")
JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}

LIMBS = (
    ("head", "l_shoulder"), ("head", "r_shoulder"), ("l_shoulder", "r_shoulder"),
    ("l_shoulder", "l_hand"), ("r_shoulder", "r_hand"), ("l_shoulder", "l_hip"),
    ("r_shoulder", "r_hip"), ("l_hip", "r_hip"), ("l_hip", "l_foot"), ("r_hip", "r_foot"),
)

# OpenPose-like colour table; left and right limbs deliberately differ.
LIMB_COLORS = np.array([
    [1.0, 0.0, 0.0], [1.0, 0.33, 0.0], [1.0, 0.67, 0.0], [0.67, 1.0, 0.0], [0.0, 1.0, 0.33],
    [0.0, 1.0, 1.0], [0.0, 0.33, 1.0], [0.33, 0.0, 1.0], [0.67, 0.0, 1.0], [1.0, 0.0, 0.67],
])
JOINT_COLORS = np.array([
    [1.0, 1.0, 1.0], [1.0, 0.5, 0.0], [0.0, 0.5, 1.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0],
    [1.0, 0.0, 0.5], [0.5, 0.0, 1.0], [0.5, 1.0, 0.0], [0.0, 1.0, 0.5],
])

# part ids in SceneClip.parts
BACKGROUND, TORSO, HEAD, LIMB = 0, 1, 2, 3

SKIN = np.array([0.93, 0.76, 0.62])
LIMB_SHADE = np.array([0.35, 0.30, 0.28])

PALETTE = np.array([
    [0.90, 0.10, 0.10], [0.95, 0.95, 0.95], [0.10, 0.20, 0.85], [0.95, 0.85, 0.10],
    [0.10, 0.70, 0.20], [0.60, 0.10, 0.70], [0.95, 0.50, 0.05], [0.05, 0.75, 0.80],
])


class ViewLabel(str, Enum):
    FRONT = "front"
    BACK = "back"
    SIDE = "side"


class LabelingError(ValueError):
    """Keypoints are missing the joints needed to decide the view."""


@dataclass
class Character:
    """Body geometry (world units) plus the two garment textures."""

    front_texture: np.ndarray
    back_texture: np.ndarray
    shoulder_width: float = 0.6
    torso_top: float = -0.45
    torso_bottom: float = 0.15
    head_y: float = -0.68
    head_radius: float = 0.16
    hand_y: float = 0.2
    hand_x: float = 0.42
    hand_z: float = 0.1
    foot_y: float = 0.78
    foot_x: float = 0.16
    pixels_per_unit: float = 0.45  # fraction of the resolution per world unit

    def skeleton(self) -> np.ndarray:
        """World-space joints ``[K, 3]`` as (x, y, z); +x is the character's left."""
        half = self.shoulder_width / 2
        return np.array([
            [0.0, self.head_y, 0.0],
            [half, self.torso_top, 0.0], [-half, self.torso_top, 0.0],
            [half * 0.8, self.torso_bottom, 0.0], [-half * 0.8, self.torso_bottom, 0.0],
            [self.hand_x, self.hand_y, self.hand_z], [-self.hand_x, self.hand_y, self.hand_z],
            [self.foot_x, self.foot_y, 0.0], [-self.foot_x, self.foot_y, 0.0],
        ])

    @property
    def width_to_torso(self) -> float:
        return self.shoulder_width / (self.torso_bottom - self.torso_top)


def make_textures(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Front: 2x2 checker of 4x4 blocks.  Back: four horizontal stripes."""
    idx = rng.permutation(len(PALETTE))[:4]
    a, b, c, d = PALETTE[idx]
    yy, xx = np.mgrid[0:8, 0:8]
    checker = ((yy // 4 + xx // 4) % 2).astype(bool)
    front = np.where(checker[..., None], b, a)
    stripes = ((yy // 2) % 2).astype(bool)
    back = np.where(stripes[..., None], d, c)
    return front.astype(DTYPE), back.astype(DTYPE)


def make_character(seed: int) -> Character:
    front, back = make_textures(make_rng([int(seed), 7]))
    return Character(front, back)


@dataclass
class SceneClip:
    frames: np.ndarray          # [N, H, W, 3] in [0, 1]
    keypoints: np.ndarray       # [N, K, 2] (y, x)
    yaw: np.ndarray             # [N]
    gt_flow: np.ndarray         # [N-1, 2, H, W] (dy, dx)
    parts: np.ndarray           # [N, H, W] part ids
    seed: int = 0
    resolution: int = 0
    turn_rate: float = 0.0
    translate: tuple = (0.0, 0.0)
    character: Character | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def masks(self) -> np.ndarray:
        return self.parts != BACKGROUND


def project_keypoints(character: Character, yaw: float, resolution: int, shift=(0.0, 0.0)) -> np.ndarray:
    pts = character.skeleton()
    c, s = np.cos(yaw), np.sin(yaw)
    xr = pts[:, 0] * c + pts[:, 2] * s
    scale = character.pixels_per_unit * resolution
    centre = (resolution - 1) / 2.0
    return np.stack([centre + shift[0] + scale * pts[:, 1], centre + shift[1] + scale * xr], axis=1)


def _segment_distance(py, px, a, b):
    """Distance of pixel centres to segment a-b and the projection parameter."""
    d = b - a
    denom = float(d @ d)
    if denom == 0:
        t = np.zeros_like(py)
    else:
        t = np.clip(((py - a[0]) * d[0] + (px - a[1]) * d[1]) / denom, 0.0, 1.0)
    qy = a[0] + t * d[0]
    qx = a[1] + t * d[1]
    return np.hypot(py - qy, px - qx), t


def _render_frame(character: Character, yaw: float, yaw_next: float, resolution: int,
                  shift, shift_next):
    """Draw one frame and its forward flow to the next pose."""
    res = resolution
    py, px = np.mgrid[0:res, 0:res].astype(DTYPE)
    img = np.zeros((res, res, 3))
    parts = np.zeros((res, res), dtype=np.int8)
    flow = np.zeros((2, res, res))
    scale = character.pixels_per_unit * res
    centre = (res - 1) / 2.0
    cy, cx = centre + shift[0], centre + shift[1]
    dty, dtx = shift_next[0] - shift[0], shift_next[1] - shift[1]

    kp = project_keypoints(character, yaw, res, shift)
    kp_next = project_keypoints(character, yaw_next, res, shift_next)
    limb_w = max(0.6, res / 64.0)
    for a_name, b_name in (("l_shoulder", "l_hand"), ("r_shoulder", "r_hand"),
                           ("l_hip", "l_foot"), ("r_hip", "r_foot")):
        ia, ib = JOINT_INDEX[a_name], JOINT_INDEX[b_name]
        dist, t = _segment_distance(py, px, kp[ia], kp[ib])
        hit = dist <= limb_w
        img[hit] = LIMB_SHADE
        parts[hit] = LIMB
        disp_a = kp_next[ia] - kp[ia]
        disp_b = kp_next[ib] - kp[ib]
        flow[0][hit] = ((1 - t) * disp_a[0] + t * disp_b[0])[hit]
        flow[1][hit] = ((1 - t) * disp_a[1] + t * disp_b[1])[hit]

    # torso panel: body coordinate b along the shoulder line, visible face by cos(yaw)
    cosy = np.cos(yaw)
    top = cy + scale * character.torso_top
    bottom = cy + scale * character.torso_bottom
    half_w = scale * character.shoulder_width / 2 * abs(cosy)
    torso = (py >= top) & (py <= bottom) & (np.abs(px - cx) <= half_w) & (half_w > 1e-9)
    if torso.any():
        b = (px - cx) / (scale * cosy)
        u = np.clip(b / character.shoulder_width + 0.5, 0.0, 1.0 - 1e-9)
        v = np.clip((py - top) / (bottom - top), 0.0, 1.0 - 1e-9)
        tex = character.front_texture if cosy > 0 else character.back_texture
        ti = (v * tex.shape[0]).astype(int)
        tj = (u * tex.shape[1]).astype(int)
        img[torso] = tex[ti[torso], tj[torso]]
        parts[torso] = TORSO
        flow[0][torso] = dty
        flow[1][torso] = (dtx + scale * b * (np.cos(yaw_next) - cosy))[torso]

    head_c = (cy + scale * character.head_y, cx)
    head = np.hypot(py - head_c[0], px - head_c[1]) <= scale * character.head_radius
    img[head] = SKIN
    parts[head] = HEAD
    flow[0][head] = dty
    flow[1][head] = dtx
    return img, parts, flow, kp


def make_turning_clip(seed: int, n_frames: int, resolution: int, turn_rate: float,
                      yaw0: float = 0.0, translate=(0.0, 0.0)) -> SceneClip:
    """Render a character spinning by ``turn_rate`` radians per frame.

    ``translate`` is an optional per-frame (dy, dx) drift in pixels.
    """
    if n_frames < 2:
        raise ConfigError("make_turning_clip needs at least 2 frames")
    if resolution < 16:
        raise ConfigError(f"resolution {resolution} is below the minimum of 16")
    character = make_character(seed)
    yaws = yaw0 + turn_rate * np.arange(n_frames + 1, dtype=DTYPE)
    shifts = np.arange(n_frames + 1, dtype=DTYPE)[:, None] * np.asarray(translate, dtype=DTYPE)[None, :]
    frames, parts, flows, kps = [], [], [], []
    for i in range(n_frames):
        img, prt, flow, kp = _render_frame(character, yaws[i], yaws[i + 1], resolution, shifts[i], shifts[i + 1])
        frames.append(img)
        parts.append(prt)
        flows.append(flow)
        kps.append(kp)
    return SceneClip(
        frames=np.stack(frames), keypoints=np.stack(kps), yaw=yaws[:n_frames].copy(),
        gt_flow=np.stack(flows[:-1]), parts=np.stack(parts), seed=int(seed),
        resolution=int(resolution), turn_rate=float(turn_rate),
        translate=tuple(float(t) for t in translate), character=character,
    )


def ground_truth_flow(clip: SceneClip, i: int) -> np.ndarray:
    """Analytic flow from frame ``i`` to ``i + 1`` (0-based), ``[2, H, W]``."""
    if not 0 <= i < len(clip) - 1:
        raise IndexError(f"transition {i} out of range for a {len(clip)}-frame clip")
    return clip.gt_flow[i]


def _as_joint_dict(keypoints) -> dict:
    if isinstance(keypoints, dict):
        return {k: np.asarray(v, dtype=DTYPE) for k, v in keypoints.items()}
    arr = np.asarray(keypoints, dtype=DTYPE).reshape(-1, 2)
    return {JOINTS[i]: arr[i] for i in range(min(len(arr), len(JOINTS))) if np.all(np.isfinite(arr[i]))}


def render_pose_map(keypoints, resolution: int) -> np.ndarray:
    """Rasterise a skeleton to ``[H, W, 3]``: coloured limbs, joint discs, black background.

    ``keypoints`` is a ``[K, 2]`` array in :data:`JOINTS` order (NaN rows are
    skipped) or a ``{joint: (y, x)}`` mapping.
    """
    joints = _as_joint_dict(keypoints)
    res = int(resolution)
    py, px = np.mgrid[0:res, 0:res].astype(DTYPE)
    img = np.zeros((res, res, 3))
    limb_w = max(0.75, res / 64.0)
    radius = max(1.5, res / 32.0)
    # anti-aliased coverage keeps sub-pixel motion a near-rigid image shift
    for li, (a, b) in enumerate(LIMBS):
        if a in joints and b in joints:
            dist, _ = _segment_distance(py, px, joints[a], joints[b])
            alpha = np.clip(limb_w + 0.5 - dist, 0.0, 1.0)[..., None]
            img = img * (1 - alpha) + LIMB_COLORS[li] * alpha
    for name, p in joints.items():
        alpha = np.clip(radius + 0.5 - np.hypot(py - p[0], px - p[1]), 0.0, 1.0)[..., None]
        img = img * (1 - alpha) + JOINT_COLORS[JOINT_INDEX[name]] * alpha
    return img


def label_view(keypoints, body_width: float | None = None, tau: float = 0.25,
               width_to_torso: float | None = None) -> ViewLabel:
    """Classify a pose as front / back / side from the shoulder ordering.

    ``s = x(l_shoulder) - x(r_shoulder)`` is compared against ``tau *
    body_width``.  When ``body_width`` is not given it is estimated from the
    torso length (invariant to yaw) times the default character's
    width-to-torso ratio.
    """
    joints = _as_joint_dict(keypoints)
    if "l_shoulder" not in joints or "r_shoulder" not in joints:
        raise LabelingError("label_view needs both shoulder keypoints")
    ls, rs = joints["l_shoulder"], joints["r_shoulder"]
    s = ls[1] - rs[1]
    if body_width is None:
        ratio = width_to_torso if width_to_torso is not None else Character(None, None).width_to_torso
        if "l_hip" in joints and "r_hip" in joints:
            torso_len = abs((joints["l_hip"][0] + joints["r_hip"][0]) / 2 - (ls[0] + rs[0]) / 2)
        else:
            raise LabelingError("label_view needs hips (or an explicit body_width)")
        body_width = ratio * torso_len
    if s > tau * body_width:
        return ViewLabel.FRONT
    if s < -tau * body_width:
        return ViewLabel.BACK
    return ViewLabel.SIDE


def label_clip(clip: SceneClip) -> list[ViewLabel]:
    return [label_view(k) for k in clip.keypoints]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    data = to_uint8(img)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a P6 file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(DTYPE) / maxval


def export_clip(clip: SceneClip, out_dir) -> list[str]:
    """Write ``frame_0000.ppm ...`` plus ``clip.json`` (keypoints, yaw, seed)."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i, frame in enumerate(clip.frames):
        path = os.path.join(out_dir, f"frame_{i:04d}.ppm")
        write_ppm(path, frame)
        written.append(path)
    sidecar = {
        "seed": clip.seed,
        "resolution": clip.resolution,
        "n_frames": len(clip),
        "turn_rate": clip.turn_rate,
        "translate": list(clip.translate),
        "joints": list(JOINTS),
        "yaw": [float(y) for y in clip.yaw],
        "keypoints": [[[float(v) for v in p] for p in kp] for kp in clip.keypoints],
        "views": [lbl.value for lbl in label_clip(clip)],
    }
    path = os.path.join(out_dir, "clip.json")
    with open(path, "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written

"""A tour of the toy world: one character turning in place.

Renders a full revolution, labels every frame by orientation, picks one
reference per orientation group and writes the clip plus its pose maps as
PPM files so they can be looked at.

    python3 demos/01_turning_world.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from profashion.model import pose_maps
from profashion.poseflow import exact_keypoint_flow, keypoint_flow_map, keypoint_discs, select_references
from profashion.synthworld import export_clip, label_clip, make_turning_clip, render_pose_map, write_ppm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/world")
n = 24
clip = make_turning_clip(seed=7, n_frames=n, resolution=32, turn_rate=2 * np.pi / n)
labels = label_clip(clip)

print("frame  yaw(deg)  view")
for i, (yaw, lbl) in enumerate(zip(clip.yaw, labels)):
    print(f"{i:5d}  {np.degrees(yaw) % 360:8.1f}  {lbl.value}")

sel = select_references(clip, 3, np.random.default_rng(0))
print("\nreferences:", dict(zip(sel.indices, [l.value for l in sel.labels])))
for w in sel.warnings:
    print("warning:", w)

# the clip itself plus pose maps next to it
export_clip(clip, out / "clip")
maps = pose_maps(clip)
(out / "pose").mkdir(parents=True, exist_ok=True)
for i, m in enumerate(maps):
    write_ppm(out / "pose" / f"pose_{i:04d}.ppm", np.repeat(m[..., None], 3, -1) if m.ndim == 2 else m)

# flow between two pose maps, Farneback vs the analytic keypoint motion, at 64 px
k0, k1 = clip.keypoints[3] * 2, clip.keypoints[4] * 2
est = keypoint_flow_map(render_pose_map(k0, 64), render_pose_map(k1, 64), k0)
ref = exact_keypoint_flow(k0, k1, 64)
_, disc = keypoint_discs(k0, (64, 64))
err = np.linalg.norm(est - ref, axis=0)[disc.astype(bool)]
print(f"\nkeypoint flow 3->4 at 64px: mean err {err.mean():.3f}px, max {err.max():.3f}px")
print("wrote", out)

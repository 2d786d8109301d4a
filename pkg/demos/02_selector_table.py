"""How the pose-aware selector spreads each frame over the references.

With an untrained model the selector compares raw pose features, so the
preference for the matching-view reference is only partial (about half to
three quarters of frames, depending on the character).  Prints the global
score table (one row per frame) and how often the highest score lands on
the reference whose view matches the frame.  Also shows that identical
references give exactly uniform scores.
"""

import numpy as np

from profashion.config import ModelConfig
from profashion.model import condition_clip, init_model
from profashion.poseflow import select_references
from profashion.synthworld import label_clip, make_turning_clip

cfg = ModelConfig()
store = init_model(cfg, 0)
n = 24
clip = make_turning_clip(seed=3, n_frames=n, resolution=32, turn_rate=2 * np.pi / n)
labels = label_clip(clip)
sel = select_references(clip, 3, np.random.default_rng(1))
ref_views = [l.value for l in sel.labels]

cc = condition_clip(clip, sel.indices, store, cfg)
m_s = cc.protos.maps.m_s

print("frame  view   " + "  ".join(f"{v:>6s}" for v in ref_views))
hits = 0
for i, row in enumerate(m_s):
    best = ref_views[int(np.argmax(row))]
    hits += best == labels[i].value
    print(f"{i:5d}  {labels[i].value:5s}  " + "  ".join(f"{x:6.3f}" for x in row) + ("  *" if best == labels[i].value else ""))
print(f"\nargmax matches frame view on {hits}/{n} frames")

same = condition_clip(clip, [sel.indices[0]] * 3, store, cfg).protos.maps.m_s
print("identical references, max |m_s - 1/3| =", float(np.abs(same - 1 / 3).max()))

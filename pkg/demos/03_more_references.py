"""Does seeing the back of a character help when animating its back?

Trains two models with identical budgets, one fed three references per clip
(front, back, side) and one fed a single front reference, then animates a
character neither model saw in training.  The score is the masked error on
back-facing frames.

The default budget is small so the demo runs in under a minute; pass
``--full`` for the full training budget (roughly 2.5 minutes per seed).

    python3 demos/03_more_references.py [--full] [--seeds 0 1]
"""

import argparse
import time

from profashion.scenario import TaskConfig, compare_reference_counts

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true")
ap.add_argument("--seeds", type=int, nargs="+", default=[0])
args = ap.parse_args()

task = TaskConfig() if args.full else TaskConfig(stage1_steps=400, stage2_steps=40, ddim_steps=20)
print(f"stage1 {task.stage1_steps} steps, stage2 {task.stage2_steps}, ddim {task.ddim_steps}, cfg {task.cfg_scale}")

t0 = time.time()
rows = compare_reference_counts(args.seeds, task,
                                log=lambda s, n, v: print(f"  seed {s}  N_r={n}  back mse {v:.4f}  ({time.time() - t0:.0f}s)"))
wins = sum(r[3] < r[1] for r in rows)
print(f"\nthree references better on {wins}/{len(rows)} seeds")

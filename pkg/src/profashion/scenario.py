"""The multi-reference view-consistency experiment, packaged for reuse.

A model is trained on a few turning characters (stage 1 then stage 2) with a
fixed number of references per clip, then animates a held-out character from
references of that character only.  Back-view masked error is the score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion as D
from . import model as M
from .config import ModelConfig
from .evalkit import evaluate_clip
from .numcore import ParamStore
from .poseflow import select_references
from .refenc import decode_latent
from .synthworld import label_clip, make_turning_clip

HELD_OUT = 99


@dataclass
class TaskConfig:
    n_refs: int = 3
    n_frames: int = 36
    resolution: int = 32
    n_chars: int = 4
    stage1_steps: int = 1500
    stage2_steps: int = 200
    lr: float = 0.5
    stage2_lr: float = 0.5
    lam: float = 0.1
    ddim_steps: int = 35
    cfg_scale: float = 3.5
    window: int = 12
    stride: int = 8

    @property
    def turn_rate(self) -> float:
        # one full revolution over the clip
        return 2 * np.pi / self.n_frames


@dataclass
class TaskResult:
    view_mse: dict
    proto_view_mse: dict
    frames: np.ndarray = field(repr=False)
    ref_indices: list = field(default_factory=list)
    stage1_losses: list = field(default_factory=list, repr=False)
    stage2_losses: list = field(default_factory=list, repr=False)


def char_seed(seed: int, k: int) -> int:
    return 1000 * seed + k


def training_set(store: ParamStore, cfg: ModelConfig, task: TaskConfig, seed: int) -> list:
    data = []
    for c in range(task.n_chars):
        clip = make_turning_clip(char_seed(seed, c), task.n_frames, task.resolution, task.turn_rate)
        sel = select_references(clip, task.n_refs, np.random.default_rng([seed, c]))
        data.append(M.condition_clip(clip, sel.indices, store, cfg))
    return data


def train_task_model(seed: int, task: TaskConfig, cfg: ModelConfig | None = None, log=None):
    cfg = cfg or ModelConfig()
    store = M.init_model(cfg, seed)
    data = training_set(store, cfg, task, seed)
    rng = np.random.default_rng([seed, task.n_refs])
    r1 = D.train_toy(store, cfg, data, D.TrainConfig(stage=1, steps=task.stage1_steps, lr=task.lr,
                                                     lam=task.lam), rng, log=log)
    r2 = D.train_toy(store, cfg, data, D.TrainConfig(stage=2, steps=task.stage2_steps, lr=task.stage2_lr,
                                                     lam=task.lam), rng, log=log)
    return store, r1, r2


def animate_held_out(store: ParamStore, seed: int, task: TaskConfig, cfg: ModelConfig | None = None) -> TaskResult:
    cfg = cfg or ModelConfig()
    clip = make_turning_clip(char_seed(seed, HELD_OUT), task.n_frames, task.resolution, task.turn_rate)
    sel = select_references(clip, task.n_refs, np.random.default_rng([seed, HELD_OUT]))
    cc = M.condition_clip(clip, sel.indices, store, cfg)
    scfg = D.SampleConfig(ddim_steps=task.ddim_steps, cfg_scale=task.cfg_scale, window=task.window,
                          stride=task.stride)
    lat = D.generate_latents(store, cfg, cc.pose_feats, cc.protos, scfg, np.random.default_rng([seed, 7]))
    frames = np.clip(decode_latent(lat, cfg.block_size, cfg.image_channels), 0.0, 1.0)
    labels = label_clip(clip)
    mask = clip.parts > 0
    rep = evaluate_clip(frames, clip.frames, labels, mask, seed)
    proto = np.clip(decode_latent(cc.protos.latent, cfg.block_size, cfg.image_channels), 0.0, 1.0)
    prep = evaluate_clip(proto, clip.frames, labels, mask, seed)
    return TaskResult(rep.view_mse, prep.view_mse, frames, list(sel.indices))


def run_task(seed: int, task: TaskConfig, cfg: ModelConfig | None = None, log=None) -> TaskResult:
    store, r1, r2 = train_task_model(seed, task, cfg, log)
    res = animate_held_out(store, seed, task, cfg)
    res.stage1_losses, res.stage2_losses = r1.losses, r2.losses
    return res


def compare_reference_counts(seeds, task: TaskConfig | None = None, counts=(3, 1), log=None) -> list:
    """Per seed: ``{n_refs: back-view masked MSE}`` with identical budgets."""
    task = task or TaskConfig()
    rows = []
    for s in seeds:
        row = {}
        for n in counts:
            t = TaskConfig(**{**task.__dict__, "n_refs": n})
            row[n] = run_task(s, t).view_mse.get("back", float("nan"))
            if log is not None:
                log(s, n, row[n])
        rows.append(row)
    return rows

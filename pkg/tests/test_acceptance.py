"""Acceptance checks, one per criterion, each printing a single PASS/FAIL line.

Run with pytest or directly: ``python tests/test_acceptance.py [numbers...]``.
"""

import os
import sys
import tempfile
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from oracles import bilinear_point, conv2d_loop, matmul_loop, projected_attention_loop  # noqa: E402

from profashion import diffusion as D  # noqa: E402
from profashion import scenario as S  # noqa: E402
from profashion.checks import offset_gradcheck  # noqa: E402
from profashion.cli import main as cli_main  # noqa: E402
from profashion.config import ModelConfig  # noqa: E402
from profashion.fpi import (fta_attention, fta_param_names, fta_query_concat, fta_resample, init_offset_head,  # noqa: E402
                            predict_offsets, prototype_spatial_attention, semantic_cross_attention_global,
                            temporal_attention)
from profashion.model import init_model, pose_maps, reference_conditioning  # noqa: E402
from profashion.numcore import (ParamStore, bilinear_sample, conv2d, init_attention, matmul,  # noqa: E402
                                sinusoidal_embedding)
from profashion.poseflow import (encode_pose, exact_keypoint_flow, farneback_flow, keypoint_discs,  # noqa: E402
                                 keypoint_flow_map)
from profashion.ppa import build_prototypes, pose_aware_selector  # noqa: E402
from profashion.refenc import spatial_self_attention  # noqa: E402
from profashion.synthworld import make_turning_clip, render_pose_map  # noqa: E402

CFG = ModelConfig()
LINES = []


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    LINES.append(line)
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()
    return ok


def rng(*s):
    return np.random.default_rng(list(s))


# 1 -------------------------------------------------------------------------

def _tok(z):
    return z.reshape(z.shape[0], -1).T


def check_oracles():
    t0 = time.time()
    errs = {}
    r = rng(1)
    a, b = r.standard_normal((7, 8)), r.standard_normal((8, 5))
    errs["matmul"] = np.max(np.abs(matmul(a, b) - matmul_loop(a, b)))
    x, k, bias = r.standard_normal((3, 8, 7)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)
    errs["conv2d"] = max(np.max(np.abs(conv2d(x, k, bias, s, p) - conv2d_loop(x, k, bias, s, p)))
                         for s, p in [(1, 0), (1, 1), (2, 1)])
    store = ParamStore(1)
    init_attention(store, "s", 8)
    init_attention(store, "c", 8, 6)
    init_attention(store, "t", 8)
    init_attention(store, "f", 8)
    init_offset_head(store, "o", 8, 4)
    store["t.wo"] = r.standard_normal((8, 8)) * 0.3
    store["o.conv2.w"] = r.standard_normal(store["o.conv2.w"].shape) * 0.1
    z = r.standard_normal((3, 8, 2, 3))
    proto = r.standard_normal((3, 8, 2, 3))
    g = r.standard_normal((3, 6))
    e = 0.0
    out = spatial_self_attention(z, store, "s", 2)
    out_p = prototype_spatial_attention(z, proto, store, "s", 2)
    for f in range(3):
        t = _tok(z[f])
        e = max(e, np.max(np.abs(_tok(out[f]) - (t + projected_attention_loop(store, "s", t, t, 2)))))
        ctx = np.concatenate([t, _tok(proto[f])])
        e = max(e, np.max(np.abs(_tok(out_p[f]) - (t + projected_attention_loop(store, "s", t, ctx, 2)))))
    errs["spatial"] = e
    out = semantic_cross_attention_global(z, g, store, "c", 2)
    errs["cross"] = max(np.max(np.abs(_tok(out[f]) - (_tok(z[f]) + projected_attention_loop(
        store, "c", _tok(z[f]), g[f:f + 1], 2)))) for f in range(3))
    out = temporal_attention(z, store, "t", 2)
    pe = sinusoidal_embedding(np.arange(3), 8)
    errs["temporal"] = max(np.max(np.abs(out[:, :, i, j] - (z[:, :, i, j] + projected_attention_loop(
        store, "t", z[:, :, i, j], z[:, :, i, j], 2, pe, pe)))) for i in range(2) for j in range(3))
    o = predict_offsets(fta_query_concat(z), store, "o")
    out = fta_attention(z, fta_resample(z, o), store, "f", 2)
    e = 0.0
    for f in range(3):
        p = max(f - 1, 0)
        u = np.stack([[bilinear_point(z[p], i + o[f, 0, i, j], j + o[f, 1, i, j]) for j in range(3)]
                      for i in range(2)]).transpose(2, 0, 1)
        t = _tok(z[f])
        e = max(e, np.max(np.abs(_tok(out[f]) - (t + projected_attention_loop(store, "f", t, _tok(u), 2)))))
    errs["fta"] = e
    dt = time.time() - t0
    worst = max(errs.values())
    ok = worst < 1e-12 and dt < 10
    return report(1, ok, f"oracle max abs err {worst:.2e} (limit 1e-12) over "
                         f"{', '.join(sorted(errs))}; {dt:.1f}s (limit 10s)")


# 2, 3 ------------------------------------------------------------------------

def _ppa_world():
    store = init_model(CFG, 0)
    clip = make_turning_clip(0, 36, 32, 2 * np.pi / 36)
    maps = pose_maps(clip)
    return store, clip, maps, encode_pose(maps, store)


def check_ppa_degeneration():
    store, clip, maps, x_p = _ppa_world()
    z_r, pyr, x_r, x_rp = reference_conditioning(clip.frames[[7]], maps[[7]], store, CFG)
    p = build_prototypes(x_p, x_rp, pyr, x_r, store, z_r=z_r)
    exact = all(np.array_equal(f, np.broadcast_to(l[0], f.shape)) for f, l in zip(p.fine, pyr))
    exact = exact and np.array_equal(p.glob, np.broadcast_to(x_r[0], p.glob.shape))
    z_r, pyr, x_r, x_rp = reference_conditioning(clip.frames[[7, 7, 7]], maps[[7, 7, 7]], store, CFG)
    p = build_prototypes(x_p, x_rp, pyr, x_r, store)
    err = max([np.max(np.abs(f - l[0])) for f, l in zip(p.fine, pyr)] + [np.max(np.abs(p.glob - x_r[0]))])
    ok = exact and err < 1e-12
    return report(2, ok, f"N_r=1 bit-exact across {len(pyr)} blocks + global: {exact}; "
                         f"identical refs max err {err:.2e} (limit 1e-12)")


def check_ppa_convexity():
    store, clip, maps, x_p = _ppa_world()
    idx = [0, 14, 26]
    z_r, pyr, x_r, x_rp = reference_conditioning(clip.frames[idx], maps[idx], store, CFG)
    m = pose_aware_selector(x_p, x_rp, store)
    conv = max(np.max(np.abs(m.m.sum(1) - 1)),
               max(np.max(np.abs(m.resized(l.shape[-2], l.shape[-1]).sum(1) - 1)) for l in pyr))
    perm = [1, 2, 0]
    a = build_prototypes(x_p, x_rp, pyr, x_r, store)
    b = build_prototypes(x_p, x_rp[perm], [l[perm] for l in pyr], x_r[perm], store)
    diff = max([np.max(np.abs(fa - fb)) for fa, fb in zip(a.fine, b.fine)] + [np.max(np.abs(a.glob - b.glob))])
    ok = conv < 1e-9 and diff < 1e-12
    return report(3, ok, f"weight-sum deviation {conv:.2e} (limit 1e-9); permutation diff {diff:.2e} (limit 1e-12)")


# 4 -----------------------------------------------------------------------------

def check_bilinear():
    r = rng(4)
    x = r.standard_normal((3, 9, 11))
    ident = np.array_equal(bilinear_sample(x, np.zeros((2, 9, 11))), x)
    yy, xx = np.mgrid[0:9, 0:11].astype(float)
    img = np.stack([0.7 * yy - 1.3 * xx + 0.25, 2.0 * xx + 0.1 * yy - 3.0])
    off = r.uniform(-1.9, 1.9, size=(2, 9, 11))
    py, px = yy + off[0], xx + off[1]
    inside = (py >= 0) & (py <= 8) & (px >= 0) & (px <= 10)
    want = np.stack([0.7 * py - 1.3 * px + 0.25, 2.0 * px + 0.1 * py - 3.0])
    err = np.max(np.abs(bilinear_sample(img, off) - want)[:, inside])
    ok = ident and err < 1e-12
    return report(4, ok, f"zero offset exact identity: {ident}; affine field max err {err:.2e} (limit 1e-12)")


# 5 -----------------------------------------------------------------------------

def _pattern(n, dy=0.0, dx=0.0):
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    y, x = yy - dy, xx - dx
    return (0.5 + 0.2 * np.sin(0.35 * x + 0.2 * y) + 0.15 * np.cos(0.27 * y - 0.1 * x)
            + 0.1 * np.sin(0.5 * x) * np.cos(0.45 * y))


def check_farneback():
    t0 = time.time()
    shifts = [(0.0, 1.0), (1.5, -0.5), (-2.0, 2.0), (0.0, 3.0), (3.0, 0.0), (2.1, -2.1), (-0.4, 0.3)]
    med = 0.0
    for dy, dx in shifts:
        f = farneback_flow(_pattern(48), _pattern(48, dy, dx))
        med = max(med, float(np.median(np.hypot(f[0] - dy, f[1] - dx)[8:-8, 8:-8])))
    clip = make_turning_clip(0, 36, 64, 2 * np.pi / 36)
    kp_err = 0.0
    for frame in (0, 5, 9, 18, 27):
        kp = clip.keypoints[frame]
        for s in [(3.0, 0.0), (0.0, 3.0), (2.1, -2.1), (-1.3, 0.7)]:
            kb = kp + np.array(s)
            est = keypoint_flow_map(render_pose_map(kp, 64), render_pose_map(kb, 64), kp)
            mask, _ = keypoint_discs(kp, (64, 64))
            kp_err = max(kp_err, float(np.hypot(*(est - exact_keypoint_flow(kp, kb, 64)))[mask].max()))
    dt = time.time() - t0
    ok = med < 0.25 and kp_err < 0.5 and dt < 30
    return report(5, ok, f"worst median translation err {med:.3f}px (limit 0.25); keypoint disc max err "
                         f"{kp_err:.3f}px (limit 0.5, 64px pose maps); {dt:.1f}s (limit 30s)")


# 6 -----------------------------------------------------------------------------

def check_gradcheck():
    t0 = time.time()
    res = offset_gradcheck(0)
    dt = time.time() - t0
    ok = res.max_rel_error < 1e-4 and dt < 60
    return report(6, ok, f"offset head + bilinear warp + masked L_o, 2 frames 16x16: max rel err "
                         f"{res.max_rel_error:.2e} at {res.worst_param}{list(res.worst_index)} (limit 1e-4); "
                         f"{dt:.1f}s (limit 60s)")


# 7 -----------------------------------------------------------------------------

def check_diffusion():
    sch = D.default_schedule()
    r = rng(7)
    x0, eps = r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3, 2, 2))
    ident = 0.0
    for t in range(0, 1000, 7):
        xt = D.add_noise(x0, eps, t, sch)
        v = D.v_target(x0, eps, t, sch)
        ident = max(ident, np.max(np.abs(D.x0_from_v(xt, v, t, sch) - x0)),
                    np.max(np.abs(D.eps_from_v(xt, v, t, sch) - eps)))

    def oracle(x, t, conditional):
        a, s = np.sqrt(sch.alpha_bar_at(t)), np.sqrt(1 - sch.alpha_bar_at(t))
        return a * (x - a * x0) / s - s * x0

    ddim = max(np.max(np.abs(D.ddim_sample(oracle, r.standard_normal(x0.shape), sch, n, start=st) - x0))
               for n, st in [(1, None), (35, None), (12, 600)])
    u, c = r.standard_normal(5), r.standard_normal(5)
    ends = np.array_equal(D.cfg_combine(u, c, 0.0), u) and np.array_equal(D.cfg_combine(u, c, 1.0), c)
    sc = D.SampleConfig()
    defaults = sc.cfg_scale == 3.5 and sc.ddim_steps == 35
    ok = ident < 1e-12 and ddim < 1e-8 and ends and defaults
    return report(7, ok, f"v/x0/eps recovery {ident:.2e} (limit 1e-12); oracle DDIM {ddim:.2e} (limit 1e-8); "
                         f"cfg endpoints exact: {ends}; defaults s={sc.cfg_scale}, steps={sc.ddim_steps}")


# 8 -----------------------------------------------------------------------------

def check_freeze():
    store = init_model(CFG, 0)
    task = S.TaskConfig(resolution=32, n_frames=12, n_chars=2)
    data = S.training_set(store, CFG, task, 0)
    fta = set(fta_param_names(store))
    worst, moved, lo = 0.0, True, []
    for lam in (0.0, 0.1, 1.0):
        work = store.copy()
        before = {n: work[n].copy() for n in work.names()}
        res = D.train_toy(work, CFG, data, D.TrainConfig(stage=2, steps=100, lam=lam), rng(8, int(lam * 10)))
        worst = max(worst, max(float(np.max(np.abs(work[n] - before[n]))) for n in before if n not in fta))
        if lam > 0:
            moved = moved and any(not np.array_equal(work[n], before[n]) for n in fta)
        lo.append(f"lam={lam}: L_o {np.mean(res.l_o[:20]):.2e}->{np.mean(res.l_o[-20:]):.2e}")
    ok = worst == 0.0 and moved
    return report(8, ok, f"100 stage-2 steps per lam in (0, 0.1, 1): max non-FTA change {worst} (must be 0), "
                         f"FTA params updated: {moved}; " + "; ".join(lo))


# 9 -----------------------------------------------------------------------------

def check_end_to_end(seeds=(0, 1, 2, 3, 4)):
    t0 = time.time()
    task = S.TaskConfig()
    rows = S.compare_reference_counts(seeds, task)
    dt = time.time() - t0
    wins = sum(r[3] < r[1] for r in rows)
    per = ", ".join(f"s{s}: {r[3]:.4f} vs {r[1]:.4f}" for s, r in zip(seeds, rows))
    steps = task.stage1_steps + task.stage2_steps
    ok = wins >= 4 and steps <= 2000
    return report(9, ok, f"back-view masked MSE N_r=3 vs N_r=1 ({per}); N_r=3 lower on {wins}/5 (need >= 4); "
                         f"{steps} steps per model; {dt / 60:.1f} min (target < 30)")


# 10 ----------------------------------------------------------------------------

def _tree(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def check_determinism():
    small = ["--set", "run.resolution=16", "--set", "run.n_frames=10", "--set", "run.n_chars=2"]
    codes, same = [], []
    with tempfile.TemporaryDirectory() as tmp:
        ck = os.path.join(tmp, "ck", "checkpoint.pfc")
        codes.append(cli_main(["train", "--out", os.path.join(tmp, "ck"), "--set", "train.steps=5"] + small))
        runs = {
            "synth": [],
            "train": ["--set", "train.steps=5"],
            "train-stage2": ["--set", "train.stage=2", "--set", "train.steps=5", "--set", f"paths.init_checkpoint={ck}"],
            "generate": ["--set", f"paths.checkpoint={ck}", "--set", "sample.ddim_steps=4"],
            "gradcheck": [],
            "inspect-ppa": ["--set", f"paths.checkpoint={ck}"],
            "evaluate": ["--set", "evaluate.seeds=0", "--set", "evaluate.stage1_steps=5",
                         "--set", "evaluate.stage2_steps=2", "--set", "sample.ddim_steps=2"],
        }
        for name, extra in runs.items():
            cmd = name.split("-stage")[0]
            trees = []
            for k in range(2):
                out = os.path.join(tmp, f"{name}-{k}")
                codes.append(cli_main([cmd, "--out", out, "--seed", "3"] + small + extra))
                trees.append(_tree(out))
            same.append((name, trees[0] == trees[1] and len(trees[0]) > 0))
    ok = all(c == 0 for c in codes) and all(s for _, s in same)
    bad = [n for n, s in same if not s]
    return report(10, ok, f"{len(same)} command runs repeated with the same config+seed; byte-identical: "
                          f"{'all' if not bad else 'not ' + ', '.join(bad)}; exit codes {sorted(set(codes))}")


CHECKS = {1: check_oracles, 2: check_ppa_degeneration, 3: check_ppa_convexity, 4: check_bilinear,
          5: check_farneback, 6: check_gradcheck, 7: check_diffusion, 8: check_freeze, 9: check_end_to_end,
          10: check_determinism}


@pytest.mark.parametrize("number", sorted(CHECKS))
def test_criterion(number):
    assert CHECKS[number]()


if __name__ == "__main__":
    chosen = [int(a) for a in sys.argv[1:]] or sorted(CHECKS)
    results = [CHECKS[n]() for n in chosen]
    sys.exit(0 if all(results) else 1)

import json

import numpy as np
import pytest

from profashion.config import ModelConfig
from profashion.model import init_model, pose_maps, reference_conditioning
from profashion.numcore import ConfigError, DimensionError
from profashion.poseflow import encode_pose
from profashion.ppa import (FULL_ATTENTION_LIMIT, PrototypeStack, build_prototypes, full_attention_aggregate,
                            pose_aware_selector, scores_report)
from profashion.synthworld import make_turning_clip

CFG = ModelConfig()


@pytest.fixture(scope="module")
def world():
    store = init_model(CFG, 0)
    clip = make_turning_clip(0, 36, 32, 2 * np.pi / 36)
    maps = pose_maps(clip)
    x_p = encode_pose(maps[:8], store)
    return store, clip, maps, x_p


def refs(world, idx):
    store, clip, maps, _ = world
    return reference_conditioning(clip.frames[idx], maps[idx], store, CFG)


def test_single_reference_is_bit_exact(world):
    store, _, _, x_p = world
    z_r, pyr, x_r, x_rp = refs(world, [3])
    p = build_prototypes(x_p, x_rp, pyr, x_r, store, z_r=z_r)
    for lvl, f in zip(pyr, p.fine):
        assert all(np.array_equal(fi, lvl[0]) for fi in f)
    assert all(np.array_equal(g, x_r[0]) for g in p.glob)
    assert all(np.array_equal(l, z_r[0]) for l in p.latent)


def test_identical_references_reproduce_the_feature(world):
    store, _, _, x_p = world
    z_r, pyr, x_r, x_rp = refs(world, [5, 5, 5])
    p = build_prototypes(x_p, x_rp, pyr, x_r, store)
    for lvl, f in zip(pyr, p.fine):
        assert np.max(np.abs(f - lvl[0])) < 1e-12
    assert np.max(np.abs(p.glob - x_r[0])) < 1e-12
    assert np.allclose(p.maps.m_s, 1 / 3, atol=1e-12)


def test_weights_convex(world):
    store, _, _, x_p = world
    _, _, _, x_rp = refs(world, [0, 14, 26])
    m = pose_aware_selector(x_p, x_rp, store)
    assert np.max(np.abs(m.m.sum(1) - 1)) < 1e-9 and m.m.min() >= 0
    assert np.max(np.abs(m.m_s.sum(1) - 1)) < 1e-9
    for h, w in [(2, 2), (1, 1), (4, 4)]:
        assert np.max(np.abs(m.resized(h, w).sum(1) - 1)) < 1e-9


def test_joint_permutation_invariance(world):
    store, _, _, x_p = world
    idx = [0, 14, 26]
    perm = [2, 0, 1]
    z_r, pyr, x_r, x_rp = refs(world, idx)
    a = build_prototypes(x_p, x_rp, pyr, x_r, store, z_r=z_r)
    b = build_prototypes(x_p, x_rp[perm], [p[perm] for p in pyr], x_r[perm], store, z_r=z_r[perm])
    for fa, fb in zip(a.fine + [a.glob, a.latent], b.fine + [b.glob, b.latent]):
        assert np.max(np.abs(fa - fb)) < 1e-12
    assert np.max(np.abs(a.maps.m_s[:, perm] - b.maps.m_s)) < 1e-12


def test_selector_prefers_matching_view(world):
    store, clip, maps, _ = world
    idx = [0, 14, 26]
    _, _, _, x_rp = refs(world, idx)
    m = pose_aware_selector(encode_pose(maps[idx], store), x_rp, store)
    assert np.array_equal(m.m_s.argmax(1), [0, 1, 2])


def test_selector_shape_mismatch(world):
    store, _, _, x_p = world
    with pytest.raises(DimensionError):
        pose_aware_selector(x_p, x_p[:, :, :2], store)


def test_full_attention_variant_convex_and_guarded(world):
    store, _, _, x_p = world
    _, pyr, x_r, x_rp = refs(world, [0, 14, 26])
    p = full_attention_aggregate(x_p, x_rp, pyr, x_r, store)
    assert [f.shape for f in p.fine] == [(8,) + l.shape[1:] for l in pyr]
    assert np.max(np.abs(p.maps.m_s.sum(1) - 1)) < 1e-9
    big = np.zeros((int(FULL_ATTENTION_LIMIT ** 0.25) + 1,) * 2)
    with pytest.raises(ConfigError):
        full_attention_aggregate(x_p[:, :, :1, :1], np.zeros((1, x_p.shape[1]) + big.shape), pyr, x_r[:1], store)


def test_prototype_stack_helpers():
    s = PrototypeStack([np.ones((4, 2, 1, 1))], np.ones((4, 3)), None, np.ones((4, 5, 1, 1)))
    z = s.zeros_like()
    assert not z.glob.any() and not z.latent.any()
    c = PrototypeStack.concat([s.frames(slice(0, 1)), s.frames(slice(2, 4))])
    assert c.glob.shape == (3, 3) and c.latent.shape[0] == 3


def test_scores_report_is_canonical_json():
    text = scores_report(np.array([[0.5, 0.5], [0.25, 0.75]]), ["front", "back"])
    doc = json.loads(text)
    assert doc["m_s"][1]["scores"] == [0.25, 0.75] and doc["m_s"][1]["view"] == "back"
    assert text == scores_report(np.array([[0.5, 0.5], [0.25, 0.75]]), ["front", "back"])

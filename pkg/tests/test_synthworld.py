import numpy as np
import pytest

from profashion.numcore import ConfigError
from profashion.synthworld import (BACKGROUND, LabelingError, ViewLabel, export_clip, label_clip, label_view,
                                   make_turning_clip, read_ppm, render_pose_map, write_ppm)


def test_same_seed_same_clip():
    a = make_turning_clip(3, 4, 32, 0.3)
    b = make_turning_clip(3, 4, 32, 0.3)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.keypoints, b.keypoints)


def test_static_clip_frames_identical():
    c = make_turning_clip(1, 5, 32, 0.0)
    assert all(np.array_equal(c.frames[0], f) for f in c.frames)
    assert np.all(c.gt_flow == 0)


def test_full_turn_covers_all_views():
    c = make_turning_clip(0, 36, 32, 2 * np.pi / 36)
    views = set(label_clip(c))
    assert views == {ViewLabel.FRONT, ViewLabel.BACK, ViewLabel.SIDE}


def test_front_and_back_differ_for_a_character():
    c = make_turning_clip(5, 36, 32, 2 * np.pi / 36)
    labels = label_clip(c)
    f = labels.index(ViewLabel.FRONT)
    b = labels.index(ViewLabel.BACK)
    torso_f = c.frames[f][c.parts[f] == 1]
    torso_b = c.frames[b][c.parts[b] == 1]
    assert not np.allclose(torso_f.mean(0), torso_b.mean(0))


def test_frames_in_range_and_masked():
    c = make_turning_clip(2, 6, 32, 0.2)
    assert c.frames.min() >= 0 and c.frames.max() <= 1
    assert c.masks.any() and (c.parts == BACKGROUND).any()


def test_bad_arguments():
    with pytest.raises(ConfigError):
        make_turning_clip(0, 1, 32, 0.1)
    with pytest.raises(ConfigError):
        make_turning_clip(0, 4, 8, 0.1)


def test_label_view_needs_shoulders():
    with pytest.raises(LabelingError):
        label_view({"head": (1.0, 2.0)})


def test_pose_map_black_background_coloured_skeleton():
    c = make_turning_clip(0, 2, 32, 0.1)
    img = render_pose_map(c.keypoints[0], 32)
    assert img.shape == (32, 32, 3)
    assert (img.sum(-1) == 0).mean() > 0.5 and img.max() > 0.9


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    assert np.allclose(read_ppm(tmp_path / "a.ppm"), img, atol=1e-12)


def test_export_clip_is_byte_identical(tmp_path):
    c = make_turning_clip(4, 3, 16, 0.5)
    a = export_clip(c, tmp_path / "a")
    b = export_clip(c, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert open(pa, "rb").read() == open(pb, "rb").read()

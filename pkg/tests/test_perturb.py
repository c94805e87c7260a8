from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tristream.perturb import (
    IDENTITY_TABLE,
    IMAGE_TABLE,
    KINDS,
    VIDEO_TABLE,
    ConfigError,
    Magnitudes,
    PerturbationTable,
    apply_kind,
    brightness,
    color_filter,
    crop_geometry,
    draw_kind,
    get_table,
    perturb_dataset,
    read_replay_log,
    rotate45,
    scale_center_crop,
    write_replay_log,
)
from tristream.streams import VideoClip

IMAGE_FREQ = {"brightness": 0.15, "rotate_cw45": 0.15, "scale_center_crop": 0.15, "identity": 0.55}
VIDEO_FREQ = {"filter_yellow": 0.10, "filter_red": 0.10, "brightness": 0.10, "rotate_ccw45": 0.10, "identity": 0.60}


# ---- tables and draws ----

def test_builtin_tables_match_protocols():
    assert IMAGE_TABLE.as_dict() == IMAGE_FREQ
    assert VIDEO_TABLE.as_dict() == VIDEO_FREQ


@pytest.mark.parametrize("rows", [
    (),
    (("identity", 0.5),),
    (("identity", 0.5), ("identity", 0.5)),
    (("sepia", 1.0),),
    (("identity", 1.2), ("brightness", -0.2)),
])
def test_invalid_tables(rows):
    with pytest.raises(ConfigError):
        PerturbationTable(rows)


def test_get_table_forms():
    assert get_table("video") is VIDEO_TABLE
    assert get_table({"identity": 1.0}) == IDENTITY_TABLE
    with pytest.raises(ConfigError):
        get_table("nope")
    with pytest.raises(ConfigError):
        draw_kind({"identity": 0.3}, "a", 0)


def test_identity_table_always_identity():
    assert {draw_kind(IDENTITY_TABLE, f"x{i}", 7) for i in range(500)} == {"identity"}


@pytest.mark.parametrize("table,freq", [(IMAGE_TABLE, IMAGE_FREQ), (VIDEO_TABLE, VIDEO_FREQ)])
def test_draw_frequencies(table, freq):
    n = 100000
    counts = Counter(draw_kind(table, f"item{i}", 0) for i in range(n))
    assert set(counts) == set(freq)
    for kind, p in freq.items():
        assert abs(counts[kind] / n - p) <= 0.005, kind


def test_draw_is_order_independent():
    ids = [f"c{i}" for i in range(200)]
    forward = {i: draw_kind(VIDEO_TABLE, i, 3) for i in ids}
    backward = {i: draw_kind(VIDEO_TABLE, i, 3) for i in reversed(ids)}
    assert forward == backward
    assert any(forward[i] != draw_kind(VIDEO_TABLE, i, 4) for i in ids)


# ---- individual perturbations ----

def test_brightness_examples():
    assert brightness(np.array([0.8]), 0.5)[0] == 0.4
    img = np.random.default_rng(0).uniform(size=(3, 6, 6))
    np.testing.assert_array_equal(brightness(img, 1.0), img)
    assert brightness(img, 0.5).mean() == pytest.approx(img.mean() / 2, abs=1e-15)
    for bad in (0.0, 1.5):
        with pytest.raises(ConfigError):
            brightness(img, bad)


def test_rotate_preserves_center():
    img = np.random.default_rng(1).uniform(size=(3, 9, 9))
    for d in ("cw", "ccw"):
        out = rotate45(img, d)
        assert out.shape == img.shape
        np.testing.assert_allclose(out[:, 4, 4], img[:, 4, 4], atol=1e-6)


def test_rotate_black_stays_black_and_corners_fill_black():
    assert not rotate45(np.zeros((3, 8, 8)), "cw").any()
    out = rotate45(np.ones((3, 16, 16)), "ccw")
    assert np.all(out[:, 0, 0] == 0.0)
    assert np.all(out[:, 8, 8] == 1.0)


def test_rotate_direction_on_screen():
    img = np.zeros((3, 17, 17))
    img[:, 4, 8] = 1.0  # above the centre
    cw = rotate45(img, "cw")[0]
    ccw = rotate45(img, "ccw")[0]
    r, c = np.unravel_index(np.argmax(cw), cw.shape)
    assert r < 8 and c > 8  # upper right
    r, c = np.unravel_index(np.argmax(ccw), ccw.shape)
    assert r < 8 and c < 8  # upper left


def test_rotate_rejects_direction():
    with pytest.raises(ConfigError):
        rotate45(np.zeros((3, 4, 4)), "left")


def test_crop_geometry():
    assert crop_geometry(96, 96, 1.5) == ((144, 144), (24, 24))
    assert scale_center_crop(np.random.default_rng(2).uniform(size=(3, 96, 96))).shape == (3, 96, 96)


def test_scale_crop_constant_image_unchanged():
    img = np.full((3, 10, 14), 0.37)
    np.testing.assert_allclose(scale_center_crop(img, 1.5), img, atol=1e-15)
    with pytest.raises(ConfigError):
        scale_center_crop(img, 1.0)


def test_scale_crop_magnifies_centre():
    img = np.zeros((3, 20, 20))
    img[:, 8:12, 8:12] = 1.0
    out = scale_center_crop(img, 2.0)
    assert (out[0] > 0.5).sum() > (img[0] > 0.5).sum()


def test_color_filter_examples():
    white = np.ones((3, 1, 1))
    np.testing.assert_allclose(color_filter(white, "yellow", 0.3)[:, 0, 0], [1.0, 1.0, 0.7], atol=1e-15)
    img = np.random.default_rng(3).uniform(size=(3, 4, 4))
    np.testing.assert_array_equal(color_filter(img, "red", 0.0), img)
    out = color_filter(img, "red", 1.0)
    np.testing.assert_array_equal(out[0], 1.0)
    np.testing.assert_array_equal(out[1:], 0.0)
    with pytest.raises(ConfigError):
        color_filter(img, "blue")


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7, 5), elements=st.floats(0, 1)), st.sampled_from(KINDS))
def test_unit_range_and_shape_preserved(img, kind):
    out = apply_kind(img, kind)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_apply_kind_on_frame_stack_is_per_frame():
    stack = np.random.default_rng(4).uniform(size=(4, 3, 9, 9))
    for kind in KINDS:
        out = apply_kind(stack, kind, Magnitudes())
        for t in range(4):
            np.testing.assert_allclose(out[t], apply_kind(stack[t], kind), atol=1e-15)


# ---- datasets ----

def tiny_clip(i, rng):
    return VideoClip(rng.uniform(size=(2, 3, 5, 5)), np.zeros((0, 0)), {0}, f"clip{i:05d}")


def test_ten_thousand_clips_match_video_table():
    rng = np.random.default_rng(5)
    clips = [tiny_clip(i, rng) for i in range(10000)]
    _, records = perturb_dataset(clips, VIDEO_TABLE, seed=11)
    counts = Counter(r.kind for r in records)
    for kind, p in VIDEO_FREQ.items():
        assert abs(counts[kind] / 10000 - p) <= 0.015, kind


def test_identity_table_is_bitwise_identity():
    rng = np.random.default_rng(6)
    clips = [tiny_clip(i, rng) for i in range(20)]
    out, _ = perturb_dataset(clips, IDENTITY_TABLE, seed=0)
    for a, b in zip(clips, out):
        assert a.frames.tobytes() == b.frames.tobytes()


def test_same_seed_same_output():
    rng = np.random.default_rng(7)
    clips = [tiny_clip(i, rng) for i in range(50)]
    a, ra = perturb_dataset(clips, VIDEO_TABLE, seed=2)
    b, rb = perturb_dataset(clips, VIDEO_TABLE, seed=2)
    assert ra == rb
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a, b))


def test_every_frame_gets_same_kind():
    rng = np.random.default_rng(8)
    clips = [VideoClip(rng.uniform(size=(5, 3, 7, 7)), np.zeros((0, 0)), {0}, f"c{i}") for i in range(60)]
    out, records = perturb_dataset(clips, VIDEO_TABLE, seed=1)
    for clip, new, rec in zip(clips, out, records):
        for t in range(clip.num_frames):
            expect = apply_kind(clip.frames[t].astype(np.float64), rec.kind).astype(np.float32)
            np.testing.assert_array_equal(new.frames[t], expect)


def test_image_items_and_replay_log(tmp_path):
    rng = np.random.default_rng(9)
    items = [(f"img{i}", rng.uniform(size=(3, 8, 8))) for i in range(30)]
    out, records = perturb_dataset(items, "image", seed=5)
    assert [i for i, _ in out] == [i for i, _ in items]
    write_replay_log(tmp_path / "log.csv", records)
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "item_id,kind,seed"
    replayed = read_replay_log(tmp_path / "log.csv")
    assert replayed == records
    for rec in replayed:
        assert draw_kind(IMAGE_TABLE, rec.item_id, rec.seed) == rec.kind

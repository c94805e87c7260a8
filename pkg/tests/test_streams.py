import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tristream import autodiff as ad
from tristream.autodiff import DimensionError, GradientTape, Tensor, backward
from tristream.streams import (
    AudioStream,
    FrameEncoder,
    NetVLAD,
    SamplerConfig,
    SlowFusion,
    SpatialEncoder,
    TemporalStream,
    VideoClip,
    audio_forward,
    fusion_schedule,
    image_as_clip,
    median_index,
    netvlad,
    sample_indices,
    sampler_for_rate,
    slow_fusion,
    spatial_forward,
    standardize_frames,
    temporal_forward,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def random_clip(r, t=30, hw=(32, 32), audio=8):
    return VideoClip(r.uniform(0, 1, (t, 3, *hw)), r.standard_normal((audio, 16)), {1}, "x")


# ---- clip and sampling ----

@pytest.mark.parametrize("n,expected", [(300, 149), (1, 0), (2, 0), (30, 14), (31, 15)])
def test_median_index(n, expected):
    assert median_index(n) == expected


def test_sampler_ten_to_one():
    np.testing.assert_array_equal(sample_indices(300, SamplerConfig(30, 10, 0)), np.arange(0, 300, 10))


def test_sampler_stride_one_takes_all_frames():
    np.testing.assert_array_equal(sample_indices(30, SamplerConfig(30, 1, 0)), np.arange(30))


def test_sampler_clamps_short_clips():
    idx = sample_indices(15, SamplerConfig(30, 10, 0))
    assert idx[:3].tolist() == [0, 10, 14]
    assert set(idx[2:].tolist()) == {14}


def test_sampler_for_rate():
    assert sampler_for_rate(30, 30) == SamplerConfig(30, 1, 0)
    assert sampler_for_rate(30, 10) == SamplerConfig(10, 3, 0)
    assert sampler_for_rate(300, 30) == SamplerConfig(30, 10, 0)
    with pytest.raises(ValueError):
        sampler_for_rate(30, 31)
    with pytest.raises(ValueError):
        sampler_for_rate(30, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 40), st.integers(1, 20), st.integers(0, 50))
def test_sample_indices_stay_in_range(n, count, stride, offset):
    idx = sample_indices(n, SamplerConfig(count, stride, offset))
    assert len(idx) == count
    assert idx.min() >= 0 and idx.max() <= n - 1
    assert np.all(np.diff(idx) >= 0)


def test_clip_validation():
    with pytest.raises(ValueError):
        VideoClip(np.zeros((301, 3, 8, 8)), np.zeros((0, 0)))
    with pytest.raises(DimensionError):
        VideoClip(np.zeros((2, 1, 8, 8)), np.zeros((0, 0)))
    with pytest.raises(ValueError):
        SamplerConfig(0, 1, 0)


def test_image_as_clip_repeats():
    img = rng().uniform(0, 1, (3, 8, 8))
    clip = image_as_clip(img, 30)
    assert clip.num_frames == 30
    assert all(np.array_equal(f, clip.frames[0]) for f in clip.frames)
    assert clip.audio_features.shape[0] == 0
    assert image_as_clip(img, 1).num_frames == 1


# ---- spatial ----

def test_zero_image_zero_head_gives_zero_embedding():
    enc = SpatialEncoder(rng(), (32, 32), out_dim=16, zero_head=True)
    emb = spatial_forward(enc, np.zeros((3, 32, 32)))
    assert emb.vector.shape == (16,)
    np.testing.assert_array_equal(emb.vector.data, 0.0)


def test_spatial_is_deterministic():
    img = rng(1).uniform(0, 1, (3, 32, 32))
    a = spatial_forward(SpatialEncoder(rng(7), out_dim=16), img).vector.data
    b = spatial_forward(SpatialEncoder(rng(7), out_dim=16), img).vector.data
    assert a.tobytes() == b.tobytes()


def test_spatial_rejects_wrong_size():
    with pytest.raises(DimensionError):
        SpatialEncoder(rng(), (32, 32))(np.zeros((1, 3, 16, 16)))


# ---- slow fusion ----

def test_fusion_schedule_30():
    levels = fusion_schedule(30)
    outputs = [len(starts) for _, starts in levels]
    assert outputs == [10, 4, 1]
    n = 30
    for w, starts in levels:
        assert starts[0] == 0 and starts[-1] + w == n  # windows cover both ends
        assert np.all(np.diff(starts) < w)  # and overlap or touch
        n = len(starts)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 10, 30, 300])
def test_fusion_schedule_reaches_one(n):
    levels = fusion_schedule(n)
    assert (len(levels[-1][1]) if levels else 1) == 1


def test_identical_frames_with_averaging_weights():
    r = rng(2)
    enc = r.uniform(0.1, 1.0, 6)
    fusion = SlowFusion(r, 30, 6, jitter=0.0)
    out = slow_fusion(np.tile(enc, (30, 1)), fusion)
    assert out.shape == (6,)
    np.testing.assert_allclose(out.data, enc, atol=1e-12)


def test_every_frame_receives_gradient():
    r = rng(3)
    fusion = SlowFusion(r, 30, 5, jitter=0.1)
    x = Tensor(r.uniform(0.2, 1.0, (30, 5)), requires_grad=True)
    with GradientTape() as tape:
        loss = ad.tsum(ad.mul(slow_fusion(x, fusion), r.standard_normal(5)))
    g = backward(loss, tape)[x]
    assert np.all(np.abs(g).sum(axis=1) > 0)


def test_perturbing_frame_zero_changes_output():
    r = rng(4)
    fusion = SlowFusion(r, 30, 5, jitter=0.1)
    x = r.uniform(0.2, 1.0, (30, 5))
    y = x.copy()
    y[0] += 0.1
    assert not np.allclose(slow_fusion(x, fusion).data, slow_fusion(y, fusion).data)


def test_slow_fusion_shape_error():
    with pytest.raises(DimensionError):
        slow_fusion(np.ones((29, 5)), SlowFusion(rng(), 30, 5))


# ---- NetVLAD ----

def test_single_cluster_residual_is_sum():
    r = rng(5)
    layer = NetVLAD(r, 4, 1)
    x = r.standard_normal((1, 7, 4))
    expected = (x[0] - layer.centers.data[0]).sum(axis=0)
    np.testing.assert_allclose(layer.residuals(x).data[0, 0], expected, atol=1e-12)


def test_two_loop_oracle():
    r = rng(6)
    layer = NetVLAD(r, 3, 2)
    layer.assign_bias.data = r.standard_normal(2)
    x = r.standard_normal((2, 3))
    w, b, c = layer.assign_weight.data, layer.assign_bias.data, layer.centers.data
    v = np.zeros((2, 3))
    for i in range(2):
        logits = [w[k] @ x[i] + b[k] for k in range(2)]
        z = sum(np.exp(logits))
        for k in range(2):
            v[k] += np.exp(logits[k]) / z * (x[i] - c[k])
    np.testing.assert_allclose(layer.residuals(x[None]).data[0], v, atol=1e-12)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    v = v.reshape(-1) / np.linalg.norm(v)
    np.testing.assert_allclose(netvlad(x, layer).data, v, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_netvlad_permutation_invariance(n, k, seed):
    r = rng(seed)
    layer = NetVLAD(r, 4, k)
    x = r.standard_normal((n, 4))
    perm = r.permutation(n)
    np.testing.assert_allclose(netvlad(x, layer).data, netvlad(x[perm], layer).data, atol=1e-12)


def test_netvlad_output_unit_norm():
    r = rng(8)
    layer = NetVLAD(r, 5, 3)
    out = netvlad([r.standard_normal(5) for _ in range(4)], layer)
    assert out.shape == (15,)
    assert abs(np.linalg.norm(out.data) - 1.0) <= 1e-10


def test_netvlad_needs_descriptors():
    with pytest.raises(ValueError):
        netvlad([], NetVLAD(rng(), 3, 2))
    with pytest.raises(ValueError):
        NetVLAD(rng(), 3, 0)


# ---- temporal ----

def small_temporal(preprocess="standardized", count=30):
    return TemporalStream(rng(9), SamplerConfig(count, 1, 0), (32, 32), 8, 3, 16, preprocess=preprocess)


def test_temporal_on_still_image_is_deterministic():
    img = rng(10).uniform(0, 1, (3, 32, 32))
    ts = small_temporal()
    a = temporal_forward(ts, image_as_clip(img, 30)).vector.data
    b = temporal_forward(ts, image_as_clip(img.copy(), 30)).vector.data
    assert a.shape == (16,)
    assert np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()


def test_temporal_is_order_sensitive():
    clip = random_clip(rng(11))
    ts = small_temporal()
    rev = VideoClip(clip.frames[::-1], clip.audio_features, clip.labels)
    assert not np.allclose(temporal_forward(ts, clip).vector.data, temporal_forward(ts, rev).vector.data)


@pytest.mark.parametrize("preprocess", ["rgb", "luma", "standardized"])
def test_frame_preprocessing_shapes(preprocess):
    enc = FrameEncoder(rng(), (32, 32), (4, 4), 8, preprocess)
    assert enc(np.zeros((2, 3, 32, 32)) + 0.5).shape == (2, 8)


def test_standardization_removes_channel_gain_and_offset():
    x = rng(12).uniform(0, 1, (2, 3, 8, 8))
    gain = np.array([0.7, 0.5, 0.9]).reshape(1, 3, 1, 1)
    shift = np.array([0.3, 0.0, 0.1]).reshape(1, 3, 1, 1)
    a = standardize_frames(x, eps=1e-12).data
    b = standardize_frames(x * gain + shift, eps=1e-12).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    # the default eps only perturbs at the eps / variance level
    np.testing.assert_allclose(standardize_frames(x).data, a, atol=1e-2)


# ---- audio ----

def test_empty_audio_is_null_embedding():
    stream = AudioStream(rng(), 16, 8, 2, 12)
    emb = audio_forward(stream, np.zeros((0, 16)))
    np.testing.assert_array_equal(emb.vector.data, np.zeros(12))


def test_audio_window_permutation_invariance():
    r = rng(13)
    stream = AudioStream(r, 16, 8, 3, 12)
    a = r.standard_normal((8, 16))
    np.testing.assert_allclose(audio_forward(stream, a).vector.data,
                               audio_forward(stream, a[r.permutation(8)]).vector.data, atol=1e-12)


def test_audio_two_cluster_oracle():
    r = rng(14)
    stream = AudioStream(r, 4, 3, 2, 5)
    a = r.standard_normal((3, 4))
    f = np.maximum(a @ stream.fc.weight.data + stream.fc.bias.data, 0)
    v = stream.vlad
    logits = f @ v.assign_weight.data.T + v.assign_bias.data
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    res = np.stack([(p[:, k:k + 1] * (f - v.centers.data[k])).sum(axis=0) for k in range(2)])
    res = res / np.linalg.norm(res, axis=1, keepdims=True)
    res = res.reshape(-1) / np.linalg.norm(res)
    expected = res @ stream.proj.weight.data + stream.proj.bias.data
    np.testing.assert_allclose(audio_forward(stream, a).vector.data, expected, atol=1e-12)


def test_embed_batch_mixed_audio():
    r = rng(15)
    stream = AudioStream(r, 16, 8, 2, 12)
    a = r.standard_normal((8, 16))
    out = stream.embed_batch([a, np.zeros((0, 16)), a[:3]]).data
    np.testing.assert_allclose(out[0], audio_forward(stream, a).vector.data, atol=1e-12)
    np.testing.assert_array_equal(out[1], 0.0)
    np.testing.assert_allclose(out[2], audio_forward(stream, a[:3]).vector.data, atol=1e-12)


def test_streams_share_embedding_length():
    r = rng(16)
    clip = random_clip(r)
    d = 16
    vs = spatial_forward(SpatialEncoder(r, out_dim=d), clip.frames[14]).vector
    vt = temporal_forward(small_temporal(), clip).vector
    va = audio_forward(AudioStream(r, 16, 8, 2, d), clip.audio_features).vector
    assert vs.shape == vt.shape == va.shape == (d,)


def test_state_dict_round_trip():
    a, b = SpatialEncoder(rng(1), out_dim=8), SpatialEncoder(rng(2), out_dim=8)
    b.load_state_dict(a.state_dict())
    img = rng(3).uniform(0, 1, (1, 3, 32, 32))
    np.testing.assert_array_equal(a(img).data, b(img).data)
    with pytest.raises(KeyError):
        b.load_state_dict({})

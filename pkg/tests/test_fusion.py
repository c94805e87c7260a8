import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grad_suite import tiny_batch, tiny_model
from tristream import autodiff as ad
from tristream.autodiff import DimensionError, Tensor
from tristream.fusion import (
    MAX_PAIRS,
    ContextGate,
    GateWeights,
    PredictionSet,
    classify,
    combine,
    compute_gates,
    context_gate,
    forward_full,
    gates_from_logits,
    make_batch,
    moe_combine,
    read_predictions,
    top_k_pairs,
    write_predictions,
)
from tristream.streams import Linear, StreamEmbedding, image_as_clip, spatial_forward


def emb(v, s):
    return StreamEmbedding(Tensor(v), s)


def random_streams(rng, d=6):
    return [emb(rng.standard_normal(d), s) for s in ("spatial", "temporal", "audio")]


# ---- gates ----

def test_zero_gate_is_uniform():
    r = np.random.default_rng(0)
    gate = Linear(r, 18, 3, zero=True)
    g = compute_gates(*random_streams(r), gate)
    np.testing.assert_allclose(g.as_array(), [1 / 3] * 3, atol=1e-15)


def test_gates_match_softmax_of_linear():
    r = np.random.default_rng(1)
    gate = Linear(r, 18, 3)
    gate.bias.data = r.standard_normal(3)
    vs, vt, va = random_streams(r)
    z = np.concatenate([vs.vector.data, vt.vector.data, va.vector.data]) @ gate.weight.data + gate.bias.data
    expected = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    np.testing.assert_allclose(compute_gates(vs, vt, va, gate).as_array(), expected, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_gates_on_simplex(seed, scale):
    r = np.random.default_rng(seed)
    gate = Linear(r, 18, 3, gain=scale)
    g = compute_gates(*[emb(r.standard_normal(6) * scale, s) for s in ("spatial", "temporal", "audio")], gate)
    a = g.as_array()
    assert np.all(a >= 0)
    assert abs(a.sum() - 1.0) <= 1e-10


def test_two_stream_gates_drop_audio():
    logits = Tensor(np.array([[0.3, -0.2, 50.0]]))
    g = gates_from_logits(logits, "two_stream").data
    assert g.shape == (1, 2)
    assert abs(g.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(g, ad.softmax(np.array([[0.3, -0.2]])).data)


def test_gate_length_mismatch():
    r = np.random.default_rng(2)
    with pytest.raises(DimensionError):
        compute_gates(emb(np.ones(4), "spatial"), emb(np.ones(5), "temporal"), emb(np.ones(4), "audio"),
                      Linear(r, 13, 3))


# ---- combination ----

def test_one_hot_gate_selects_stream():
    r = np.random.default_rng(3)
    vs, vt, va = random_streams(r)
    np.testing.assert_array_equal(moe_combine(vs, vt, va, GateWeights(1.0, 0.0, 0.0)).data, vs.vector.data)


def test_equal_streams_give_that_stream():
    v = np.random.default_rng(4).standard_normal(6)
    out = moe_combine(emb(v, "spatial"), emb(v, "temporal"), emb(v, "audio"), GateWeights(0.2, 0.5, 0.3))
    np.testing.assert_allclose(out.data, v, atol=1e-15)


def test_combine_matches_scalar_loop():
    r = np.random.default_rng(5)
    for _ in range(200):
        vs, vt, va = random_streams(r, d=int(r.integers(1, 10)))
        g = r.dirichlet(np.ones(3))
        out = moe_combine(vs, vt, va, GateWeights(*g)).data
        for i in range(out.size):
            ref = vs.vector.data[i] * g[0] + vt.vector.data[i] * g[1] + va.vector.data[i] * g[2]
            assert abs(out[i] - ref) <= 1e-12


def test_batched_combine_matches_single():
    r = np.random.default_rng(6)
    vecs = [r.standard_normal((4, 5)) for _ in range(3)]
    gates = r.dirichlet(np.ones(3), size=4)
    out = combine([Tensor(v) for v in vecs], Tensor(gates)).data
    for b in range(4):
        single = moe_combine(*[emb(v[b], s) for v, s in zip(vecs, ("spatial", "temporal", "audio"))],
                             GateWeights(*gates[b])).data
        np.testing.assert_allclose(out[b], single, atol=1e-12)


# ---- context gate ----

def test_context_gate_zero_params_halves():
    r = np.random.default_rng(7)
    cg = ContextGate(r, 5)
    cg.weight.data[:] = 0.0
    v = r.standard_normal(5)
    np.testing.assert_allclose(context_gate(v, cg).data, 0.5 * v, atol=1e-15)


def test_context_gate_saturates():
    r = np.random.default_rng(8)
    cg = ContextGate(r, 5)
    cg.weight.data[:] = 0.0
    cg.bias.data[:] = 50.0
    v = r.standard_normal(5)
    np.testing.assert_allclose(context_gate(v, cg).data, v, atol=1e-12)


def test_context_gate_oracle_and_bound():
    r = np.random.default_rng(9)
    for _ in range(100):
        d = int(r.integers(1, 8))
        cg = ContextGate(r, d)
        cg.bias.data = r.standard_normal(d)
        v = r.standard_normal(d) * 3
        out = context_gate(v, cg).data
        for i in range(d):
            z = sum(cg.weight.data[i, j] * v[j] for j in range(d)) + cg.bias.data[i]
            assert abs(out[i] - v[i] / (1 + np.exp(-z))) <= 1e-12
        assert np.all(np.abs(out) <= np.abs(v))


def test_context_gate_length_check():
    with pytest.raises(DimensionError):
        ContextGate(np.random.default_rng(), 4)(np.ones(5))


# ---- classification and PredictionSet ----

def test_classify_clamps_to_class_count():
    r = np.random.default_rng(10)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        p = classify(r.standard_normal(4), Linear(r, 4, 5), "a", top_k=20)
    assert len(p.pairs) == 5
    assert caught


def test_sigmoid_ties_break_by_class_id():
    r = np.random.default_rng(11)
    p = classify(r.standard_normal(4), Linear(r, 4, 6, zero=True), "a", top_k=6, multilabel=True)
    assert [c for c, _ in p.pairs] == list(range(6))
    assert all(f == 0.5 for _, f in p.pairs)


def test_softmax_confidences_sum_to_one():
    r = np.random.default_rng(12)
    p = classify(r.standard_normal(4), Linear(r, 4, 7), "a", top_k=7)
    assert abs(sum(f for _, f in p.pairs) - 1.0) <= 1e-12
    confs = [f for _, f in p.pairs]
    assert confs == sorted(confs, reverse=True)


def test_top_k_pairs_is_stable():
    conf = np.array([0.2, 0.5, 0.2, 0.5, 0.1])
    assert top_k_pairs(conf, 4) == [(1, 0.5), (3, 0.5), (0, 0.2), (2, 0.2)]


def test_prediction_set_limits():
    with pytest.raises(ValueError):
        PredictionSet("a", [(i, 0.1) for i in range(MAX_PAIRS + 1)])
    with pytest.raises(ValueError):
        PredictionSet("a,b", [])


def test_prediction_file_round_trip(tmp_path):
    preds = [PredictionSet("x1", [(3, 0.9), (1, 0.05)]), PredictionSet("x2", [])]
    write_predictions(tmp_path / "p.csv", preds)
    back = read_predictions(tmp_path / "p.csv")
    assert [p.item_id for p in back] == ["x1", "x2"]
    assert back[0].pairs == [(3, 0.9), (1, 0.05)]


# ---- full model ----

def test_spatial_only_composition():
    r = np.random.default_rng(13)
    model = tiny_model(normalize_streams=False)
    img = r.uniform(0, 1, (3, 8, 8))
    got = forward_full(model, image_as_clip(img, 5, "im"), "spatial_only", top_k=4)
    v = spatial_forward(model.spatial, img).vector
    want = classify(context_gate(v, model.context), model.classifier, "im", top_k=4)
    assert [c for c, _ in got.pairs] == [c for c, _ in want.pairs]
    np.testing.assert_allclose([f for _, f in got.pairs], [f for _, f in want.pairs], atol=1e-12)


def test_normalized_spatial_only_composition():
    r = np.random.default_rng(14)
    model = tiny_model()
    img = r.uniform(0, 1, (3, 8, 8))
    got = forward_full(model, image_as_clip(img, 5, "im"), "spatial_only", top_k=4)
    v = spatial_forward(model.spatial, img).vector
    v = ad.l2_normalize(v) * np.sqrt(model.config.embed_dim)
    want = classify(context_gate(v, model.context), model.classifier, "im", top_k=4)
    np.testing.assert_allclose([f for _, f in got.pairs], [f for _, f in want.pairs], atol=1e-12)


def test_two_stream_gates_sum_to_one():
    r = np.random.default_rng(15)
    model = tiny_model()
    model.gate.weight.data = r.standard_normal(model.gate.weight.shape)
    _, aux = model.forward(make_batch(tiny_batch(r), model.config.sampler), "two_stream", return_aux=True)
    np.testing.assert_allclose(aux["gates"].data.sum(axis=1), 1.0, atol=1e-12)
    assert aux["gates"].shape[1] == 2


@pytest.mark.parametrize("stream,index", [("spatial", 0), ("temporal", 1), ("audio", 2)])
def test_forced_gate_reproduces_single_stream(stream, index):
    r = np.random.default_rng(16)
    model = tiny_model()
    batch = make_batch(tiny_batch(r), model.config.sampler)
    bias = np.full(3, -1000.0)
    bias[index] = 1000.0
    model.gate.bias.data = bias
    model.gate.weight.data = r.standard_normal(model.gate.weight.shape) * 0.1
    logits = model.forward(batch, "three_stream").data
    single = model.embeddings(batch, "three_stream")[stream]
    np.testing.assert_allclose(logits, model.head(single).data, atol=1e-12)


def test_context_gate_on_logits_option():
    r = np.random.default_rng(17)
    model = tiny_model(context_gate_on="logits")
    assert model.context.dim == model.config.num_classes
    out = model.forward(make_batch(tiny_batch(r), model.config.sampler), "three_stream")
    assert out.shape == (3, model.config.num_classes)


def test_unknown_mode():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.forward(make_batch(tiny_batch(np.random.default_rng()), model.config.sampler), "four_stream")


def test_predict_respects_contract():
    r = np.random.default_rng(18)
    model = tiny_model(multilabel=True)
    preds = model.predict(make_batch(tiny_batch(r), model.config.sampler), "three_stream", top_k=3)
    for p in preds:
        assert len(p.pairs) == 3
        confs = [f for _, f in p.pairs]
        assert confs == sorted(confs, reverse=True)
        assert all(0 <= f <= 1 for f in confs)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ARCH_SPECS, make_batch, random_streams, tiny_batch, tiny_model, tiny_spec
from mgfusion.diffcore import Tensor, check_gradients, cross_entropy, softmax
from mgfusion.errors import ConfigError, DimensionError, EmptySequenceError, LoadError
from mgfusion.models import (
    CoattentionStack,
    LateFusionModel,
    LinearBranch,
    ModelSpec,
    MultiHeadAttention,
    build_model,
    combine_scores,
    decode_checkpoint,
    encode_checkpoint,
    posterior_of,
)

F64 = np.float64


def _f64(module):
    return module.astype(F64)


# -- attention -----------------------------------------------------------------
def test_zero_query_gives_uniform_attention():
    rng = np.random.default_rng(0)
    mha = _f64(MultiHeadAttention(4, 2, rng))
    mha.q.W.data[:] = 0
    mha.q.b.data[:] = 0
    xq = rng.normal(size=(1, 3, 4))
    xkv = rng.normal(size=(1, 5, 4))
    out = mha(Tensor(xq), Tensor(xkv), np.ones((1, 5), bool)).data
    V = xkv[0] @ mha.v.W.data + mha.v.b.data
    expected = V.mean(axis=0) @ mha.o.W.data + mha.o.b.data
    np.testing.assert_allclose(out[0], np.tile(expected, (3, 1)), atol=1e-12)


def test_single_head_matches_closed_form():
    rng = np.random.default_rng(1)
    mha = _f64(MultiHeadAttention(2, 1, rng))
    for lin in (mha.q, mha.k, mha.v, mha.o):
        lin.W.data[:] = np.eye(2)
        lin.b.data[:] = 0
    mha.k.W.data[:] = [[2.0, 0.0], [0.0, 1.0]]
    q = np.array([[1.0, 0.5]])
    kv = np.array([[1.0, 0.0], [0.0, 2.0]])
    out = mha(Tensor(q[None]), Tensor(kv[None]), np.ones((1, 2), bool)).data[0]
    # scores: q.(2,0)=2 and q.(0,2)=1, scaled by 1/sqrt(2)
    s = np.array([2.0, 1.0]) / math.sqrt(2)
    w = np.exp(s) / np.exp(s).sum()
    np.testing.assert_allclose(out, [w @ kv], atol=1e-12)


def test_masked_key_equals_deleted_key():
    rng = np.random.default_rng(2)
    mha = _f64(MultiHeadAttention(6, 3, rng))
    xq = rng.normal(size=(1, 2, 6))
    xkv = rng.normal(size=(1, 4, 6))
    mask = np.array([[True, False, True, True]])
    full = mha(Tensor(xq), Tensor(xkv), mask).data
    dropped = mha(Tensor(xq), Tensor(np.delete(xkv, 1, axis=1)), np.ones((1, 3), bool)).data
    np.testing.assert_allclose(full, dropped, atol=1e-6)


def test_attention_all_keys_masked():
    mha = MultiHeadAttention(4, 2, np.random.default_rng(0))
    with pytest.raises(EmptySequenceError):
        mha(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 2, 4))), np.zeros((1, 2), bool))


# -- coattention ---------------------------------------------------------------
def _stack(D=4, H=2, seed=0):
    return _f64(CoattentionStack(D, H, 2, 0.2, 3, np.random.default_rng(seed)))


def test_coattention_symmetric_branches():
    stack = _stack()
    for layer in stack.layers:
        layer.speech_branch.load_state_dict(layer.text_branch.state_dict())
    x = np.random.default_rng(5).normal(size=(1, 1, 4))
    m = np.ones((1, 1), bool)
    a, b = stack.branches(Tensor(x), Tensor(x.copy()), m, m)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(stack(Tensor(x), Tensor(x), m, m).data, a.data)


@pytest.mark.parametrize("Kt, Ks", [(1, 1), (3, 7), (6, 2)])
def test_coattention_output_shape(Kt, Ks):
    rng = np.random.default_rng(Kt * 10 + Ks)
    out = _stack()(Tensor(rng.normal(size=(2, Kt, 4))), Tensor(rng.normal(size=(2, Ks, 4))),
                   np.ones((2, Kt), bool), np.ones((2, Ks), bool))
    assert out.shape == (2, 4)


def test_coattention_speech_permutation():
    rng = np.random.default_rng(9)
    t, s = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 5, 4))
    tm, sm = np.ones((1, 3), bool), np.array([[True, True, False, True, True]])
    perm = rng.permutation(5)
    stack = _stack()
    a = stack(Tensor(t), Tensor(s), tm, sm).data
    b = stack(Tensor(t), Tensor(s[:, perm]), tm, sm[:, perm]).data
    np.testing.assert_allclose(a, b, atol=1e-5)


# -- early fusion --------------------------------------------------------------
def test_early_fusion_full_width():
    spec = ModelSpec(arch="coattention", granularities=("P", "W", "S", "F"), dim=768,
                     text_layers=1, speech_layers=1, heads=8, ff_mult=1, coattention_layers=1)
    model = build_model(spec)
    batch = tiny_batch(spec, B=1, K_max=2)
    c = model.fused_embedding(batch)
    assert c.shape == (1, 3072)
    logits = model(batch)
    assert logits.shape == (1, 4)
    np.testing.assert_allclose(posterior_of(logits.data).sum(), 1.0, atol=1e-6)


def test_early_fusion_single_granularity():
    model = tiny_model("coattention", granularities=("S",))
    assert model.head.fc.W.shape == (8, 8)
    pred = model.predict(tiny_batch(model.spec))
    np.testing.assert_allclose(pred.posterior.sum(axis=-1), 1.0, atol=1e-6)


# -- concat early fusion -------------------------------------------------------
def test_concat_branch_width():
    spec = ModelSpec(arch="concat", granularities=("F",), dim=768, text_layers=1, speech_layers=1)
    assert build_model(spec).branch.fc1.W.shape == (1536, 128)


def test_concat_duplicate_utterance():
    spec = tiny_spec("concat")
    model = tiny_model("concat")
    s = random_streams(np.random.default_rng(3), spec)
    pred = model.predict(make_batch([s, s]))
    np.testing.assert_array_equal(pred.logits[0], pred.logits[1])
    np.testing.assert_allclose(pred.posterior.sum(axis=-1), 1.0, atol=1e-6)


# -- linear branch and late fusion --------------------------------------------
def test_linear_branch_permutation_and_single_position():
    rng = np.random.default_rng(4)
    br = _f64(LinearBranch(5, 7, 6, 4, 0.2, rng))
    seq = rng.normal(size=(1, 6, 5))
    mask = np.array([[True, True, True, False, True, True]])
    perm = rng.permutation(6)
    a = br(Tensor(seq), mask).data
    b = br(Tensor(seq[:, perm]), mask[:, perm]).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    one = seq[:, :1]
    h = np.maximum(one[0, 0] @ br.fc1.W.data + br.fc1.b.data, 0)
    h = np.maximum(h @ br.fc2.W.data + br.fc2.b.data, 0)
    np.testing.assert_allclose(br(Tensor(one), np.ones((1, 1), bool)).data[0],
                               h @ br.out.W.data + br.out.b.data, atol=1e-12)


def test_linear_branch_zero_input():
    br = LinearBranch(5, 7, 6, 4, 0.2, np.random.default_rng(0))
    out = br(Tensor(np.zeros((2, 3, 5), np.float32)), np.ones((2, 3), bool)).data
    np.testing.assert_array_equal(out, 0)


def test_late_fusion_single_branch_equals_linear_model():
    late = tiny_model("late_fusion")
    batch = tiny_batch(late.spec, B=4, seed=8)
    lin = build_model(tiny_spec("linear", granularities=(), text=True)).astype(F64)
    lin.load_state_dict({n: p.data for n, p in late.named_parameters()
                         if n.startswith(("mixers.T.", "branches.T."))})
    branch = late.branch_logits(batch)["T"].data
    np.testing.assert_array_equal(lin.predict(batch).posterior, posterior_of(branch))


def test_late_fusion_logits_are_branch_sum():
    late = tiny_model("late_fusion")
    logits = late(tiny_batch(late.spec, seed=2)).data
    parts = late.last_branch_logits
    total = parts["T"] + parts["P"] + parts["S"] + parts["F"]
    np.testing.assert_array_equal(logits, total)


def test_late_fusion_hand_softmax():
    late = tiny_model("late_fusion", granularities=("F",))
    for key, bias in (("T", [1, 0, 0, 0]), ("F", [0, 1, 0, 0])):
        late.branches[key].out.W.data[:] = 0
        late.branches[key].out.b.data[:] = bias
    post = late.predict(tiny_batch(late.spec, B=1)).posterior[0]
    e = math.e
    np.testing.assert_allclose(post, np.array([e, e, 1, 1]) / (2 * e + 2), atol=1e-12)


def test_late_fusion_five_branches():
    model = tiny_model("late_fusion", granularities=("P", "W", "S", "F"))
    assert set(model.branches) == {"T", "P", "W", "S", "F"}
    assert model(tiny_batch(model.spec)).shape == (3, 4)


# -- transformer baseline ------------------------------------------------------
def test_transformer_output():
    model = tiny_model("transformer")
    pred = model.predict(tiny_batch(model.spec))
    assert pred.logits.shape == (3, 4)
    np.testing.assert_allclose(pred.posterior.sum(axis=-1), 1.0, atol=1e-6)
    assert len(model.encoder) == 3


# -- score combination ---------------------------------------------------------
def test_combine_examples():
    a = np.array([0.3, -1.0, 2.0, 0.1])
    np.testing.assert_allclose(combine_scores(a, a).posterior, posterior_of(a), atol=1e-15)
    assert combine_scores([2, 0, 0, 0], [0, 4, 0, 0]).labels == 1
    assert combine_scores([3, 1, 0, 0], [2, 0, 1, 1]).labels == 0


def test_combine_dim_mismatch():
    with pytest.raises(DimensionError):
        combine_scores(np.zeros(4), np.zeros(3))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=4, max_size=4),
       st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.floats(-100, 100))
def test_combine_shift_invariance(a, b, c):
    a, b = np.array(a), np.array(b)
    base = combine_scores(a, b)
    shifted = combine_scores(a + c, b)
    np.testing.assert_allclose(base.posterior, shifted.posterior, atol=1e-9)


# -- whole-model properties ----------------------------------------------------
@pytest.mark.parametrize("tag", sorted(ARCH_SPECS))
def test_eval_is_deterministic(tag):
    model = tiny_model(tag, dtype=np.float32)
    batch = tiny_batch(model.spec, seed=6)
    assert model(batch).data.tobytes() == model(batch).data.tobytes()


@pytest.mark.parametrize("tag", sorted(ARCH_SPECS))
def test_posteriors_are_distributions(tag):
    model = tiny_model(tag, dtype=np.float32)
    post = model.predict(tiny_batch(model.spec, B=5, seed=1)).posterior
    assert np.all(post >= 0)
    np.testing.assert_allclose(post.sum(axis=-1), 1.0, atol=1e-6)


def test_dropout_only_in_training_mode():
    model = tiny_model("late_fusion", dtype=np.float32)
    batch = tiny_batch(model.spec)
    a = model(batch, rng=np.random.default_rng(0)).data
    b = model(batch, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("tag", sorted(ARCH_SPECS))
def test_model_gradients(tag):
    model = tiny_model(tag)
    batch = tiny_batch(model.spec, B=2, seed=3)
    named = list(model.named_parameters())
    res = check_gradients(lambda: cross_entropy(model(batch), batch.labels),
                          [p for _, p in named], names=[n for n, _ in named], max_entries=6)
    assert res.max_rel_error <= 1e-4, res


# -- spec and checkpoints ------------------------------------------------------
@pytest.mark.parametrize("kw", [
    dict(arch="late_fusion", granularities=(), text=True),
    dict(arch="coattention", granularities=("F",), text=False),
    dict(arch="linear", granularities=("F",), text=True),
    dict(arch="transformer", granularities=("F", "P"), text=False),
    dict(arch="concat", granularities=("P",), text=True),
    dict(arch="coattention", granularities=("F",), dim=10, heads=4),
    dict(arch="bogus"),
    dict(arch="late_fusion", granularities=("F", "F")),
])
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        ModelSpec(**kw)


def test_spec_orders_granularities_and_defaults():
    spec = ModelSpec(arch="late_fusion", granularities=("F", "S"))
    assert spec.granularities == ("S", "F")
    assert spec.inputs == ("T", "S", "F")
    assert ModelSpec(arch="late_fusion").default_lr == 1e-3
    assert ModelSpec(arch="concat").default_lr == 1e-3
    assert ModelSpec(arch="coattention", granularities=("F",)).default_lr == 5e-5
    assert ModelSpec(arch="transformer", granularities=()).default_lr == 5e-5
    assert ModelSpec.from_json(spec.to_json()) == spec


@pytest.mark.parametrize("tag", sorted(ARCH_SPECS))
def test_checkpoint_round_trip(tag):
    model = tiny_model(tag, dtype=np.float32)
    blob = encode_checkpoint(model)
    again = decode_checkpoint(blob)
    assert again.spec == model.spec
    batch = tiny_batch(model.spec)
    assert again(batch).data.tobytes() == model(batch).data.tobytes()
    assert encode_checkpoint(again) == blob


def test_checkpoint_rejects_mismatch_and_damage():
    model = tiny_model("linear", dtype=np.float32)
    blob = encode_checkpoint(model)
    with pytest.raises(LoadError):
        decode_checkpoint(blob, expected=tiny_spec("linear", hidden1=9))
    with pytest.raises(LoadError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(LoadError):
        decode_checkpoint(b"XXXX" + blob[4:])
    other = build_model(tiny_spec("late_fusion"))
    with pytest.raises(LoadError):
        other.load_state_dict(model.state_dict())

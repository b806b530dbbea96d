import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgfusion.diffcore import masked_mean
from mgfusion.errors import DegenerateWeightsError, DimensionError, ParseError, ValidationError
from mgfusion.granularity import (
    ARPABET_VOWELS,
    AlignmentTiers,
    LayeredEmbedding,
    LayerMixer,
    Segment,
    frame_of,
    mix_layers,
    parse_alignment,
    pool_segments,
    resolve_tier,
    serialize_alignment,
    syllabify,
    syllabify_tiers,
)


def brute_force_pool(data, segments):
    """Reference: average frames s..e-1 with an explicit loop."""
    L, _, D = data.shape
    out = np.zeros((L, len(segments), D))
    for l in range(L):
        for k, seg in enumerate(segments):
            acc = np.zeros(D)
            for f in range(seg.start, seg.end):
                acc += data[l, f]
            out[l, k] = acc / (seg.end - seg.start)
    return out


def random_segmentation(rng, K):
    cuts = np.sort(rng.choice(np.arange(1, K), size=rng.integers(0, K - 1), replace=False)) \
        if K > 1 else np.array([], int)
    edges = [0, *cuts.tolist(), K]
    segs = [Segment(a, b, f"s{i}") for i, (a, b) in enumerate(zip(edges[:-1], edges[1:]))]
    keep = rng.random(len(segs)) < 0.8
    keep[0] = True
    return [s for s, k in zip(segs, keep) if k]


# -- alignment parsing ---------------------------------------------------------
def test_parse_two_phones():
    tiers = parse_alignment("phone 0 5 AH\nphone 5 9 T", 10)
    assert tiers.phones == (Segment(0, 5, "AH"), Segment(5, 9, "T"))
    assert tiers.words == () and tiers.syllables is None
    assert tiers.stride_ms == 20


def test_parse_clips_end_with_warning():
    tiers = parse_alignment("phone 0 4 AH\nphone 4 12 T\n", 10)
    assert tiers.phones[-1] == Segment(4, 10, "T")
    assert len(tiers.warnings) == 1 and "clipped to 10" in tiers.warnings[0]


def test_parse_rejects_empty_segment():
    with pytest.raises(ValidationError):
        parse_alignment("phone 5 5 AH", 10)


def test_parse_rejects_overlap():
    with pytest.raises(ValidationError, match="overlap"):
        parse_alignment("phone 0 5 AH\nphone 4 8 T", 10)


@pytest.mark.parametrize("text, line", [
    ("phone 0 5 AH\nphone 5 X T", 2),
    ("# comment\nvowel 0 5 AH", 2),
    ("phone 0 5", 1),
    ("phone -1 5 AH", 1),
])
def test_parse_errors_carry_line_number(text, line):
    with pytest.raises(ParseError) as info:
        parse_alignment(text, 10)
    assert info.value.line == line


def test_parse_header_and_comments():
    text = "#stride_ms 10\n# a note\nword 0 6 CAT\nphone 0 2 K\nphone 2 4 AE\nphone 4 6 T\n"
    tiers = parse_alignment(text, 6, "u1")
    assert tiers.stride_ms == 10 and tiers.utterance_id == "u1"
    assert tiers.words == (Segment(0, 6, "CAT"),)


def test_explicit_syllables_must_sit_on_phone_edges():
    text = "phone 0 2 K\nphone 2 4 AE\nsyllable 0 3 KAE\n"
    with pytest.raises(ValidationError):
        parse_alignment(text, 4)


def test_frame_of_uses_stride():
    assert frame_of(0.0) == 0
    assert frame_of(0.059) == 2
    assert frame_of(0.06) == 3
    assert frame_of(0.06, stride_ms=10) == 6


def _tiers_strategy():
    @st.composite
    def build(draw):
        n = draw(st.integers(1, 12))
        durs = draw(st.lists(st.integers(1, 4), min_size=n, max_size=n))
        labels = draw(st.lists(st.sampled_from(["AH", "B", "K", "IY", "T", "S"]),
                               min_size=n, max_size=n))
        edges = np.concatenate([[0], np.cumsum(durs)]).tolist()
        phones = tuple(Segment(a, b, lab) for a, b, lab in zip(edges[:-1], edges[1:], labels))
        split = draw(st.integers(1, n))
        words = (Segment(0, edges[split], "w0"),)
        if split < n:
            words += (Segment(edges[split], edges[-1], "w1"),)
        with_syl = draw(st.booleans())
        tiers = AlignmentTiers("u", phones, words, None, draw(st.sampled_from([10, 20])))
        if with_syl:
            tiers.syllables = syllabify_tiers(tiers)
        return tiers, edges[-1]
    return build()


@settings(max_examples=80, deadline=None)
@given(_tiers_strategy())
def test_alignment_round_trip(case):
    tiers, K = case
    text = serialize_alignment(tiers)
    again = parse_alignment(text, K, "u")
    assert again == tiers
    assert serialize_alignment(again) == text


# -- syllables -----------------------------------------------------------------
def _phones(labels, dur=2):
    return [Segment(i * dur, (i + 1) * dur, lab) for i, lab in enumerate(labels)]


def test_syllabify_single_nucleus():
    assert syllabify(_phones(["K", "AE", "T"])) == (Segment(0, 6, "K-AE-T"),)


def test_syllabify_maximal_onset():
    out = syllabify(_phones(["AH", "B", "AH"]))
    assert out == (Segment(0, 2, "AH"), Segment(2, 6, "B-AH"))


def test_syllabify_vowelless_word():
    assert syllabify(_phones(["S", "T"])) == (Segment(0, 4, "S-T"),)


def test_syllabify_empty_and_stress_marks():
    assert syllabify([]) == ()
    out = syllabify(_phones(["S", "T", "R", "IY1", "T", "AH0", "N"]))
    assert [s.label for s in out] == ["S-T-R-IY1", "T-AH0-N"]


def test_syllabify_custom_vowel_set():
    out = syllabify(_phones(["a", "b", "a"]), vowels={"A"})
    assert len(out) == 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["AH", "IY", "B", "K", "T", "S"]), min_size=1, max_size=10),
       st.lists(st.integers(1, 4), min_size=10, max_size=10),
       st.lists(st.integers(0, 2), min_size=10, max_size=10))
def test_syllables_tile_the_word(labels, durs, gaps):
    phones, t = [], 0
    for lab, d, g in zip(labels, durs, gaps):
        phones.append(Segment(t, t + d, lab))
        t += d + g
    out = syllabify(phones)
    assert out[0].start == phones[0].start and out[-1].end == phones[-1].end
    for a, b in zip(out[:-1], out[1:]):
        assert a.end == b.start
    assert all(s.end > s.start for s in out)
    n_vowels = sum(p.label in ARPABET_VOWELS for p in phones)
    assert len(out) == max(1, n_vowels)
    edges = {p.start for p in phones} | {phones[-1].end}
    assert all(s.start in edges for s in out)


def test_syllabify_tiers_respects_words():
    phones = _phones(["K", "AE", "T", "AH", "B", "AH"])
    words = (Segment(0, 6, "cat"), Segment(6, 12, "aba"))
    sylls = syllabify_tiers(AlignmentTiers("u", tuple(phones), words))
    assert [(s.start, s.end) for s in sylls] == [(0, 6), (6, 8), (8, 12)]


def test_resolve_tier_reports_fallback():
    tiers = parse_alignment("phone 0 2 AH\nphone 2 4 B\nphone 4 6 AH\n", 6)
    segs, fallback = resolve_tier(tiers, "syllable")
    assert fallback and len(segs) == 2
    _, fallback = resolve_tier(tiers, "phone")
    assert not fallback


# -- pooling -------------------------------------------------------------------
def test_pool_hand_example():
    frames = LayeredEmbedding("speech", "frame", np.array([[[1, 3], [5, 7], [9, 11]]], float))
    out = pool_segments(frames, [Segment(0, 2)])
    np.testing.assert_allclose(out.data, [[[3, 5]]])
    assert out.granularity == "phone"


def test_pool_constant_sequence():
    v = np.array([0.5, -2.0, 4.0])
    frames = LayeredEmbedding("speech", "frame", np.tile(v, (2, 7, 1)))
    out = pool_segments(frames, [Segment(1, 4), Segment(4, 7)], "word")
    np.testing.assert_allclose(out.data, np.tile(v, (2, 2, 1)), rtol=1e-6)


def test_pool_keeps_feature_width():
    frames = LayeredEmbedding("speech", "frame", np.zeros((1, 10, 768)))
    out = pool_segments(frames, [Segment(0, 3), Segment(3, 10)])
    assert (out.L, out.K, out.D) == (1, 2, 768)


def test_pool_rejects_out_of_range():
    frames = LayeredEmbedding("speech", "frame", np.zeros((1, 5, 2)))
    with pytest.raises(ValidationError):
        pool_segments(frames, [Segment(3, 6)])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pool_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    L, K, D = rng.integers(1, 4), rng.integers(1, 25), rng.integers(1, 6)
    data = rng.normal(size=(L, K, D)).astype(np.float32)
    segs = random_segmentation(rng, K)
    out = pool_segments(LayeredEmbedding("speech", "frame", data), segs)
    np.testing.assert_allclose(out.data, brute_force_pool(data.astype(float), segs), atol=1e-6)


def test_single_segment_pool_equals_masked_mean():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(1, 9, 4)).astype(np.float32)
    pooled = pool_segments(LayeredEmbedding("speech", "frame", data), [Segment(0, 9)])
    mm = masked_mean(data[0].astype(np.float64), np.ones(9, bool)).data
    np.testing.assert_allclose(pooled.data[0, 0], mm, atol=1e-6)


# -- layer mixing --------------------------------------------------------------
def _mixer(weights, D):
    m = LayerMixer(len(weights), D, dtype=np.float64)
    m.weights.data[:] = weights
    return m


def test_mix_identical_layers_ignores_weights():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3, 5))
    stack = np.stack([v] * 4)
    ref = mix_layers(stack, _mixer([1, 1, 1, 1], 5)).data
    for w in ([0.1, 5, 2, 1], [-1, 3, 0.5, 0.2]):
        np.testing.assert_allclose(mix_layers(stack, _mixer(w, 5)).data, ref, atol=1e-9)


def test_mix_hand_example():
    stack = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    out = mix_layers(stack, _mixer([1, 3], 2)).data
    np.testing.assert_allclose(out, [[-1, 1]], atol=2e-4)


def test_mix_twelve_layers_to_one_sequence():
    stack = LayeredEmbedding("speech", "frame", np.random.default_rng(1).normal(size=(12, 7, 768)))
    out = LayerMixer(12, 768)(stack)
    assert out.shape == (7, 768)


def test_mix_weight_count_mismatch():
    with pytest.raises(DimensionError):
        LayerMixer(3, 4)(np.zeros((2, 5, 4)))


def test_mix_degenerate_weights():
    with pytest.raises(DegenerateWeightsError):
        mix_layers(np.ones((2, 3, 4)), _mixer([1.0, -1.0], 4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_mix_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    stack = rng.normal(size=(4, 6, 5))
    w = rng.uniform(0.1, 2, size=4)
    a = mix_layers(stack, _mixer(w, 5)).data
    b = mix_layers(stack, _mixer(w * c, 5)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_mix_gradients():
    from mgfusion.diffcore import check_gradients, tsum
    rng = np.random.default_rng(4)
    stack = rng.normal(size=(2, 3, 4, 5))
    m = _mixer(rng.uniform(0.5, 1.5, size=3), 5)
    m.ln_gain.data[:] = rng.normal(size=5)
    R = rng.normal(size=(2, 4, 5))
    res = check_gradients(lambda: tsum(m(stack) * R), m.parameters(),
                          names=[n for n, _ in m.named_parameters()])
    assert res.max_rel_error <= 1e-6, res

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avfuse import context as cx
from avfuse.autodiff import Tape, Tensor
from avfuse import autodiff as ad
from avfuse.context import Role
from avfuse.model import ModelConfig, init_params


@pytest.fixture(scope="module")
def params():
    p = init_params(ModelConfig(), seed=3)
    # give the null tokens distinct values so replacement is observable
    rng = np.random.default_rng(0)
    for name in ("ctx.null_text", "ctx.null_timbre", "ctx.markers"):
        p[name].data = rng.standard_normal(p[name].shape)
    return p


def _timbre(params, k):
    return cx.TimbreEmbedding(cx.encode_timbre(Tensor(np.full((8, 12), float(k))), params))


# -- parsing --------------------------------------------------------------------

def test_parse_without_spans():
    rec = cx.parse_prompt("pattern three rises")
    assert rec.spans == () and rec.text == "pattern three rises"


def test_parse_one_span():
    text = "A speaker says <S>pattern three<E>"
    (span,) = cx.parse_prompt(text).spans
    assert span.text == "pattern three"
    assert text[span.start:span.end] == "pattern three"


def test_parse_two_ordered_spans_with_speakers():
    rec = cx.parse_prompt("speaker:2 says <S>a<E> then <S>b<E>")
    assert [s.text for s in rec.spans] == ["a", "b"]
    assert rec.spans[0].end < rec.spans[1].start
    assert [s.speaker_id for s in rec.spans] == [2, None]


@pytest.mark.parametrize("text", ["<S>a", "a<E>", "<S>a<S>b<E><E>", "<S>a<E><E>", "speaker:1 a",
                                  "<S>speaker:1 a<E>", "speaker:1 speaker:2 <S>a<E>"])
def test_parse_errors(text):
    with pytest.raises(cx.PromptError):
        cx.parse_prompt(text)


# -- text encoding ----------------------------------------------------------------

def test_vocabulary_is_closed_and_small():
    assert len(cx.VOCAB) == 64 and len(set(cx.VOCAB)) == 64


def test_encode_text_examples():
    assert cx.encode_text("") == []
    text = "a blob traces pattern three"
    assert cx.encode_text(text) == cx.encode_text(text)
    for w in cx.VOCAB:
        assert cx.decode_text(cx.encode_text(w)) == w
    ids = cx.encode_text("speaker:3 says <S>pattern one<E>")
    assert ids[1] == cx.ROW_SPAN_START and ids[-1] == cx.ROW_SPAN_END


def test_out_of_vocabulary_words_are_listed():
    with pytest.raises(cx.VocabularyError, match="flamingo"):
        cx.encode_text("a flamingo traces pattern one")


# -- timbre encoder ---------------------------------------------------------------

def test_timbre_pooling_is_order_invariant(params, rng):
    ref = rng.standard_normal((8, 12))
    a = cx.encode_timbre(Tensor(ref), params).data
    b = cx.encode_timbre(Tensor(ref[rng.permutation(8)]), params).data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_constant_reference_pools_to_its_row(params, rng):
    row = rng.standard_normal(12)
    one = cx.encode_timbre(Tensor(row[None, :]), params).data
    many = cx.encode_timbre(Tensor(np.tile(row, (8, 1))), params).data
    np.testing.assert_allclose(one, many, atol=1e-14)


def test_timbre_encoder_receives_gradients(params, rng):
    with Tape() as tape:
        loss = ad.total(cx.encode_timbre(Tensor(rng.standard_normal((8, 12))), params))
    ad.backward(loss, tape)
    assert params["timbre.w1"].grad is not None and np.abs(params["timbre.w1"].grad).sum() > 0
    for p in params.values():
        p.grad = None


def test_empty_reference_is_an_error(params):
    with pytest.raises(ValueError):
        cx.encode_timbre(Tensor(np.zeros((0, 12))), params)


# -- augmentation -----------------------------------------------------------------

def test_no_spans_gives_only_text(params):
    rec = cx.parse_prompt("a blob traces pattern three")
    seq = cx.augment_context(rec, {}, params)
    assert seq.roles == [Role.TEXT] * 5 and seq.tokens.shape == (5, 32)


def test_one_span_layout(params):
    rec = cx.parse_prompt("speaker:1 says <S>pattern three<E>")
    seq = cx.augment_context(rec, {0: _timbre(params, 1)}, params)
    assert seq.roles == [Role.TEXT, Role.SPAN_START, Role.TIMBRE, Role.TEXT, Role.TEXT, Role.SPAN_END]
    plain = cx.augment_context(rec, {}, params)
    assert plain.roles[2] is Role.NULL_TIMBRE
    np.testing.assert_array_equal(plain.tokens.data[2], params["ctx.null_timbre"].data[0])


def test_swapping_timbre_map_swaps_only_timbre_tokens(params):
    rec = cx.parse_prompt("speaker:1 says <S>pattern one<E> then speaker:2 says <S>pattern one again<E>")
    t1, t2 = _timbre(params, 1), _timbre(params, 2)
    a = cx.augment_context(rec, {0: t1, 1: t2}, params)
    b = cx.augment_context(rec, {0: t2, 1: t1}, params)
    idx = [i for i, r in enumerate(a.roles) if r is Role.TIMBRE]
    assert len(idx) == 2 and a.roles == b.roles
    np.testing.assert_array_equal(a.tokens.data[idx[0]], b.tokens.data[idx[1]])
    np.testing.assert_array_equal(a.tokens.data[idx[1]], b.tokens.data[idx[0]])
    rest = [i for i in range(len(a.roles)) if i not in idx]
    np.testing.assert_array_equal(a.tokens.data[rest], b.tokens.data[rest])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=0, max_size=3), st.integers(0, 2**31 - 1))
def test_role_sequence_determines_span_structure(lengths, seed):
    words = ["pattern", "one", "two"]
    text = "a blob " + " ".join("<S>" + " ".join(words[:n]) + "<E>" for n in lengths)
    rec = cx.parse_prompt(text)
    rng = np.random.default_rng(seed)
    bound = [i for i in range(len(lengths)) if rng.random() < 0.5]
    plan = cx.plan_context(rec, bound)
    # reconstruct spans from roles alone
    found, inside = [], None
    for r in plan.roles:
        if r is Role.SPAN_START:
            inside = 0
        elif r is Role.SPAN_END:
            found.append(inside)
            inside = None
        elif inside is not None and r is Role.TEXT:
            inside += 1
    assert found == lengths
    for i, r in enumerate(plan.roles):
        if r in (Role.TIMBRE, Role.NULL_TIMBRE):
            assert plan.roles[i - 1] is Role.SPAN_START


# -- dropout ----------------------------------------------------------------------

def _two_span_seq(params):
    rec = cx.parse_prompt("speaker:1 says <S>pattern one<E> then speaker:2 says <S>pattern one again<E>")
    return cx.augment_context(rec, {0: _timbre(params, 1), 1: _timbre(params, 2)}, params)


def test_drop_probability_zero_is_identity(params):
    seq = _two_span_seq(params)
    out = cx.drop_conditions(seq, 0.0, False, np.random.default_rng(0), params)
    assert out.roles == seq.roles
    np.testing.assert_array_equal(out.tokens.data, seq.tokens.data)


def test_drop_probability_one_nulls_every_timbre(params):
    seq = _two_span_seq(params)
    out = cx.drop_conditions(seq, 1.0, False, np.random.default_rng(0), params)
    assert Role.TIMBRE not in out.roles
    assert out.roles == [Role.NULL_TIMBRE if r is Role.TIMBRE else r for r in seq.roles]
    for i, r in enumerate(seq.roles):
        if r is Role.TIMBRE:
            np.testing.assert_array_equal(out.tokens.data[i], params["ctx.null_timbre"].data[0])
        else:
            np.testing.assert_array_equal(out.tokens.data[i], seq.tokens.data[i])


def test_drop_text_gives_single_null_token(params):
    out = cx.drop_conditions(_two_span_seq(params), 0.3, True, np.random.default_rng(0), params)
    assert out.roles == [Role.NULL_TEXT] and out.tokens.shape == (1, 32)


def test_drop_is_deterministic_per_seed(params):
    seq = _two_span_seq(params)
    a = cx.drop_conditions(seq, 0.5, False, np.random.default_rng(7), params)
    b = cx.drop_conditions(seq, 0.5, False, np.random.default_rng(7), params)
    assert a.roles == b.roles
    np.testing.assert_array_equal(a.tokens.data, b.tokens.data)


def test_drop_plan_matches_drop_conditions(params):
    rec = cx.parse_prompt("speaker:1 says <S>pattern one<E> then speaker:2 says <S>pattern one again<E>")
    plan = cx.plan_context(rec, [0, 1])
    seq = _two_span_seq(params)
    for seed in range(20):
        a = cx.drop_plan(plan, 0.5, False, np.random.default_rng(seed))
        b = cx.drop_conditions(seq, 0.5, False, np.random.default_rng(seed), params)
        assert a.roles == b.roles


def test_per_span_timbre_drop_rate(params):
    """Each timbre token is dropped independently at the configured rate."""
    rec = cx.parse_prompt("speaker:1 says <S>pattern one<E> then speaker:2 says <S>pattern one again<E>")
    plan = cx.plan_context(rec, [0, 1])
    rng = np.random.default_rng(11)
    kept = np.array([[s in cx.drop_plan(plan, 0.2, False, rng).timbre_spans for s in (0, 1)]
                     for _ in range(10_000)])
    rates = 1 - kept.mean(axis=0)
    assert np.all(np.abs(rates - 0.2) < 0.02)
    both = np.mean(~kept[:, 0] & ~kept[:, 1])
    assert abs(both - 0.04) < 0.01


def test_materialize_batch_pads_with_masked_rows(params):
    recs = [cx.parse_prompt("a blob"), cx.parse_prompt("speaker:1 says <S>pattern one<E>")]
    plans = [cx.plan_context(recs[0]), cx.plan_context(recs[1], [0])]
    tim = [None, cx.encode_timbre(Tensor(np.ones((1, 8, 12))), params)]
    tokens, slots, mask = cx.materialize_batch(plans, tim, params)
    assert tokens.shape == (2, 6, 32)
    np.testing.assert_array_equal(mask, [[1, 1, 0, 0, 0, 0], [1] * 6])
    np.testing.assert_array_equal(slots[1], [0, 1, 1, 1, 1, 1])
    np.testing.assert_array_equal(tokens.data[1, 2], tim[1].data[0])

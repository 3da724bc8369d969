import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctislu.metrics import (EvaluationError, SlotPrediction, UndefinedMetricError, build_report,
                            corpus_wer, edit_distance, ic_accuracy, pair_credit, slot_f1, wer)


def test_wer_examples():
    assert wer("turn on the light", "turn off the light") == 0.25
    assert wer("a b c", "a b c") == 0.0
    assert wer("a b", "") == 1.0
    assert wer("a", "b c d") == 3.0


def test_wer_empty_reference():
    with pytest.raises(UndefinedMetricError):
        wer("", "a")


def test_corpus_wer_pools_edits():
    assert corpus_wer(["a b", "c d e f"], ["a", "c d e f"]) == pytest.approx(1 / 6)


words = st.lists(st.sampled_from("abcd"), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(words, words, st.integers(0, 7), st.sampled_from("abcde"), st.sampled_from(["sub", "ins", "del"]))
def test_single_edit_moves_distance_by_at_most_one(ref, hyp, pos, tok, kind):
    base = edit_distance(ref, hyp)
    h = list(hyp)
    i = min(pos, len(h) - 1)
    if kind == "sub":
        h[i] = tok
    elif kind == "ins":
        h.insert(pos % (len(h) + 1), tok)
    else:
        del h[i]
    assert abs(edit_distance(ref, h) - base) <= 1
    assert edit_distance(ref, ref) == 0


def test_slot_f1_exact_and_conventions():
    g = [[SlotPrediction("time", "nine am", 3, 5)]]
    assert slot_f1(g, g, "span") == (1.0, 1.0, 1.0)
    assert slot_f1([[]], [[]], "span") == (1.0, 1.0, 1.0)
    assert slot_f1(g, [[]], "span")[2] == 0.0


def test_word_partial_credit():
    assert pair_credit("nine am", "nine", "word") == pytest.approx(2 / 3)
    p, r, f = slot_f1([[("time", "nine am", 3, 5)]], [[("time", "nine", 3, 4)]], "word")
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
    assert slot_f1([[("time", "nine am")]], [[("time", "nine")]], "span")[2] == 0.0


def test_char_credit_and_normalisation():
    assert pair_credit("New  York", "new york", "span") == 1.0
    assert 0 < pair_credit("paris", "parks", "char") < 1


def test_type_mismatch_earns_nothing():
    assert slot_f1([[("time", "noon")]], [[("date", "noon")]], "word")[2] == 0.0


def test_gold_consumed_once():
    gold = [[("person", "john")]]
    pred = [[("person", "john", 0, 1), ("person", "john", 2, 3)]]
    p, r, f = slot_f1(gold, pred, "span")
    assert (p, r) == (0.5, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(
    st.lists(st.tuples(st.sampled_from(["a", "b"]), st.sampled_from(["x y", "x", "y z", "zz"])), max_size=3),
    st.lists(st.tuples(st.sampled_from(["a", "b"]), st.sampled_from(["x y", "x", "y", "zz z"])), max_size=3)),
    min_size=1, max_size=5))
def test_partial_variants_dominate_span(pairs):
    gold = [[(t, v, i, i + 1) for i, (t, v) in enumerate(g)] for g, _ in pairs]
    pred = [[(t, v, i, i + 1) for i, (t, v) in enumerate(p)] for _, p in pairs]
    span = slot_f1(gold, pred, "span")[2]
    assert span <= slot_f1(gold, pred, "word")[2] + 1e-12
    assert span <= slot_f1(gold, pred, "char")[2] + 1e-12


def test_ic_accuracy():
    assert ic_accuracy(["a", "b"], ["a", "b"]) == 1.0
    assert ic_accuracy(["a", "b"], ["a", "c"]) == 0.5
    assert ic_accuracy(["a"], ["b"]) in (0.0, 1.0)
    with pytest.raises(EvaluationError):
        ic_accuracy(["a"], ["a", "b"])


def test_report_is_consistent_and_serialisable():
    rep = build_report(["x", "y"], ["x", "x"], [[("t", "nine am")], []], [[("t", "nine")], []],
                       ["a b"], ["a c"])
    assert rep.slu_f1 == (rep.span_f1 + rep.word_f1 + rep.char_f1) / 3
    assert rep.confusion == {"x": {"x": 1}, "y": {"x": 1}}
    for v in (rep.ic_accuracy, rep.span_f1, rep.word_f1, rep.char_f1, rep.slu_f1):
        assert 0.0 <= v <= 1.0
    assert json.loads(rep.to_json())["wer"] == 0.5


def test_metrics_deterministic():
    args = (["x"], ["x"], [[("t", "a b")]], [[("t", "a")]])
    assert build_report(*args) == build_report(*args)

import itertools
import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcycle.errors import ContractError
from dualcycle.metrics import (
    EvalReport,
    bleu,
    corpus_rouge,
    lcs_length,
    micro_f1,
    rouge_l,
    rouge_n,
    sample_f1,
    sentence_bleu,
)

words = st.lists(st.sampled_from("abcd"), min_size=1, max_size=7)
label_sets = st.sets(st.integers(0, 4), max_size=5)


# -- micro-F1 ----------------------------------------------------------------------


def test_micro_f1_examples():
    golds = [{"a", "b"}, {"c"}]
    assert micro_f1(golds, golds) == 1.0
    assert micro_f1([set(), set()], golds) == 0.0
    assert micro_f1([{"a", "b"}], [{"b", "c"}]) == 0.5
    assert micro_f1([set()], [set()]) == 0.0
    with pytest.raises(ContractError):
        micro_f1([{"a"}], [])


def _confusion_f1(preds, golds):
    """Per-label confusion matrices summed over the label universe."""
    labels = set().union(*preds, *golds) if preds else set()
    tp = fp = fn = 0
    for lab in labels:
        for p, g in zip(preds, golds):
            tp += lab in p and lab in g
            fp += lab in p and lab not in g
            fn += lab not in p and lab in g
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(label_sets, label_sets), max_size=6))
def test_micro_f1_matches_confusion_oracle(rows):
    preds, golds = [p for p, _ in rows], [g for _, g in rows]
    assert micro_f1(preds, golds) == pytest.approx(_confusion_f1(preds, golds), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(label_sets, label_sets), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_micro_f1_permutation_invariant(rows, rnd):
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    a = micro_f1([p for p, _ in rows], [g for _, g in rows])
    b = micro_f1([p for p, _ in shuffled], [g for _, g in shuffled])
    assert a == pytest.approx(b, abs=1e-12)


def test_sample_f1():
    assert sample_f1({1, 2}, {2, 3}) == 0.5
    assert sample_f1(set(), set()) == 1.0
    assert sample_f1({1}, set()) == 0.0


# -- BLEU --------------------------------------------------------------------------


def test_bleu_examples():
    ref = "the cat sat on the mat".split()
    assert bleu([ref], [[ref]]) == 1.0
    assert bleu([["the"] * 4], [["the cat sat".split()]]) == 0.0
    with pytest.raises(ContractError):
        bleu([ref], [[]])
    with pytest.raises(ContractError):
        bleu([ref], [])


def _naive_bleu(hyps, ref_sets):
    """Straight transcription of the clipped-precision definition."""
    log_sum = 0.0
    for n in range(1, 5):
        num = den = 0
        for h, refs in zip(hyps, ref_sets):
            grams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            for g in set(grams):
                best = max(sum(1 for i in range(len(r) - n + 1) if tuple(r[i:i + n]) == g) for r in refs)
                num += min(grams.count(g), best)
            den += len(grams)
        if num == 0:
            return 0.0
        log_sum += math.log(num / den) / 4
    c = sum(len(h) for h in hyps)
    r = sum(sorted(refs, key=lambda x: (abs(len(x) - len(h)), len(x)))[0].__len__()
            for h, refs in zip(hyps, ref_sets))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_sum)


def test_bleu_hand_counted_example():
    hyp = "the cat is on the mat".split()
    refs = ["the cat sat on the mat".split(), "there is a cat on the mat".split()]
    # clipped counts by hand: unigrams 6/6, bigrams 3/5, trigrams 1/4, 4-grams 0/3
    assert bleu([hyp], [refs]) == 0.0
    assert bleu([hyp], [refs]) == pytest.approx(_naive_bleu([hyp], [refs]), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from("abc"), min_size=4, max_size=9),
                          st.lists(st.lists(st.sampled_from("abc"), min_size=1, max_size=9), min_size=1, max_size=3)),
                min_size=1, max_size=4))
def test_bleu_matches_naive_oracle(rows):
    hyps, refs = [h for h, _ in rows], [r for _, r in rows]
    assert bleu(hyps, refs) == pytest.approx(_naive_bleu(hyps, refs), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(words, st.lists(words, min_size=1, max_size=3)), min_size=1, max_size=4))
def test_bleu_doubling_and_permutation(rows):
    hyps, refs = [h for h, _ in rows], [r for _, r in rows]
    base = bleu(hyps, refs)
    assert 0.0 <= base <= 1.0
    assert bleu(hyps * 2, refs * 2) == pytest.approx(base, abs=1e-12)
    assert bleu(hyps[::-1], refs[::-1]) == pytest.approx(base, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(words, min_size=1, max_size=3), min_size=1, max_size=4), st.data())
def test_bleu_is_one_on_exact_matches(ref_sets, data):
    hyps = [data.draw(st.sampled_from(rs)) for rs in ref_sets]
    # each hypothesis is one of its references, so the closest length is its own
    assert bleu(hyps, ref_sets) == pytest.approx(1.0, abs=1e-12)
    assert corpus_rouge(hyps, ref_sets) == {"rouge_1": 1.0, "rouge_2": 1.0, "rouge_l": 1.0}


def test_sentence_bleu_is_smoothed_but_corpus_is_not():
    hyp, ref = "a b c d".split(), "a c b d".split()
    assert bleu([hyp], [[ref]]) == 0.0
    assert sentence_bleu(hyp, [ref]) > 0.0
    assert sentence_bleu(ref, [ref]) == 1.0


# -- ROUGE -------------------------------------------------------------------------


def test_rouge_examples():
    s = "near the river".split()
    assert rouge_n(s, [s], 1) == rouge_n(s, [s], 2) == rouge_l(s, [s]) == 1.0
    assert rouge_l("a b c d".split(), ["a c b d".split()]) == pytest.approx(0.75)
    assert rouge_n(["x", "y"], [["p", "q"]], 1) == 0.0
    assert rouge_l(["x", "y"], [["p", "q"]]) == 0.0
    with pytest.raises(ContractError):
        rouge_l(s, [])
    with pytest.raises(ContractError):
        rouge_n(s, [], 1)


def test_rouge_takes_best_reference():
    hyp = "a b".split()
    assert rouge_n(hyp, [["z"], ["a", "b"]], 1) == 1.0


def _brute_lcs(a, b):
    for k in range(min(len(a), len(b)), 0, -1):
        subs = set(itertools.combinations(a, k))
        if any(c in subs for c in itertools.combinations(b, k)):
            return k
    return 0


@settings(max_examples=150, deadline=None)
@given(words, words)
def test_lcs_matches_brute_force(a, b):
    assert lcs_length(a, b) == _brute_lcs(a, b)


@settings(max_examples=100, deadline=None)
@given(words, words)
def test_rouge_n_oracle(h, r):
    for n in (1, 2):
        hc = Counter(tuple(h[i:i + n]) for i in range(len(h) - n + 1))
        rc = Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
        if not hc or not rc:
            continue
        ov = sum(min(c, rc[g]) for g, c in hc.items())
        expected = 0.0 if ov == 0 else 2 * ov / (sum(hc.values()) + sum(rc.values()))
        assert rouge_n(h, [r], n) == pytest.approx(expected, abs=1e-12)


def test_corpus_rouge_is_mean_over_samples():
    hyps = [["a", "b"], ["x"]]
    refs = [[["a", "b"]], [["y"]]]
    assert corpus_rouge(hyps, refs)["rouge_l"] == 0.5


# -- report ------------------------------------------------------------------------


def test_eval_report_round_trip_and_range():
    r = EvalReport(0.8, 0.25, 0.5, 0.3, 0.45, nlu_samples=10, nlg_samples=4)
    assert EvalReport.from_text(r.to_text()) == r
    assert EvalReport.from_dict(r.to_dict()) == r
    with pytest.raises(ContractError):
        EvalReport(1.2, 0, 0, 0, 0)

import json
import math
import random
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bleu_oracle, cider_d_oracle, lcs_oracle, rouge_l_oracle
from radreward.corpus import ParsedReport
from radreward.metrics import (
    DegenerateIdfError,
    IdfContext,
    MetricReport,
    TokenizedPair,
    bleu,
    cider_d,
    cider_d_pair,
    evaluate_nlg,
    lcs_length,
    rouge_l,
    rouge_l_pair,
)

FIXTURES = Path(__file__).parent / "fixtures"


def load_corpus():
    raw = json.loads((FIXTURES / "metric_corpus.json").read_text())
    return [TokenizedPair(p["candidate"], p["references"]) for p in raw]


def as_oracle(pairs):
    return [(list(p.candidate), [list(r) for r in p.references]) for p in pairs]


def test_pair_requires_reference():
    with pytest.raises(ValueError):
        TokenizedPair(["a"], [])


def test_empty_corpus_rejected():
    for fn in (bleu, rouge_l, cider_d):
        with pytest.raises(ValueError):
            fn([])


def test_bleu_identity():
    pairs = [TokenizedPair("a b c d e".split(), ["a b c d e".split()])]
    assert bleu(pairs) == [1.0, 1.0, 1.0, 1.0]


def test_bleu_clipped_unigram():
    pairs = [TokenizedPair(["the"] * 4, [["the", "cat"]])]
    assert bleu(pairs, 1) == [0.25]


def test_bleu_brevity_penalty_half_length():
    pairs = [TokenizedPair("a b".split(), ["a b c d".split()])]
    assert bleu(pairs, 1)[0] == pytest.approx(math.exp(-1))


def test_bleu_zero_order_zeroes_higher_orders():
    pairs = [TokenizedPair("b a".split(), ["a b".split()])]
    assert bleu(pairs) == [1.0, 0.0, 0.0, 0.0]


def test_bleu_rejects_bad_order():
    with pytest.raises(ValueError):
        bleu(load_corpus(), 5)


def test_rouge_examples():
    assert rouge_l_pair("the cat sat on mat".split(), ["the cat on the mat".split()]) == pytest.approx(0.8)
    assert rouge_l_pair("a b".split(), ["a b".split()]) == 1.0
    assert rouge_l_pair("a b".split(), ["c d".split()]) == 0.0


def test_rouge_takes_best_reference():
    assert rouge_l_pair("a b".split(), ["c".split(), "a b".split()]) == 1.0


def test_cider_two_pair_identity():
    pairs = [
        TokenizedPair("the heart is normal".split(), ["the heart is normal".split()]),
        TokenizedPair("no pleural effusion seen".split(), ["no pleural effusion seen".split()]),
    ]
    assert cider_d(pairs) == pytest.approx(10.0, abs=1e-12)
    assert cider_d(pairs) == pytest.approx(cider_d_oracle(as_oracle(pairs)), abs=1e-12)


def test_cider_short_identity_loses_missing_orders():
    # three tokens have no 4-gram, so that order scores 0
    pairs = [
        TokenizedPair("the heart is normal".split(), ["the heart is normal".split()]),
        TokenizedPair("no pleural effusion".split(), ["no pleural effusion".split()]),
    ]
    assert cider_d(pairs) == pytest.approx((10.0 + 7.5) / 2, abs=1e-12)


def test_cider_no_shared_ngrams():
    pairs = [
        TokenizedPair("x y".split(), ["a b".split()]),
        TokenizedPair("c d".split(), ["c d".split()]),
    ]
    idf = IdfContext.from_pairs(pairs)
    assert cider_d_pair(pairs[0].candidate, pairs[0].references, idf) == 0.0


def test_cider_degenerate_idf():
    with pytest.raises(DegenerateIdfError):
        cider_d([TokenizedPair(["a"], [["a"]])])
    same = [TokenizedPair(["a"], [["a"]]), TokenizedPair(["b"], [["a"]])]
    with pytest.raises(DegenerateIdfError):
        cider_d(same)


@pytest.mark.parametrize("sigma", [1.0, 3.0, 6.0])
def test_cider_sigma_monotone_for_length_mismatch(sigma):
    pairs = load_corpus()
    idf = IdfContext.from_pairs(pairs)
    for p in pairs:
        if all(len(r) != len(p.candidate) for r in p.references):
            lo = cider_d_pair(p.candidate, p.references, idf, sigma)
            hi = cider_d_pair(p.candidate, p.references, idf, 2 * sigma)
            assert hi >= lo


def test_hand_corpus_matches_oracle():
    pairs = load_corpus()
    ref = as_oracle(pairs)
    for got, want in zip(bleu(pairs), bleu_oracle(ref)):
        assert got == pytest.approx(want, abs=1e-9)
    assert rouge_l(pairs) == pytest.approx(rouge_l_oracle(ref), abs=1e-9)
    assert cider_d(pairs) == pytest.approx(cider_d_oracle(ref), abs=1e-9)


def test_permutation_invariance():
    pairs = load_corpus()
    shuffled = pairs[:]
    random.Random(3).shuffle(shuffled)
    assert bleu(shuffled) == pytest.approx(bleu(pairs), abs=1e-12)
    assert rouge_l(shuffled) == pytest.approx(rouge_l(pairs), abs=1e-12)
    assert cider_d(shuffled) == pytest.approx(cider_d(pairs), abs=1e-12)


def test_bounds_on_hand_corpus():
    pairs = load_corpus()
    assert all(0.0 <= b <= 1.0 for b in bleu(pairs))
    assert 0.0 <= rouge_l(pairs) <= 1.0
    assert 0.0 <= cider_d(pairs) <= 10.0


def test_bleu_clipping_property():
    ref = [["the", "cat", "sat"]]
    nums = []
    for k in range(1, 6):
        score = bleu([TokenizedPair(["the"] * k + ["cat"], ref)], 1)[0]
        nums.append(score * (k + 1))  # BP is 1 once the candidate is longer
    assert all(n <= 2 + 1e-12 for n in nums[2:])


words = st.sampled_from("a b c d e".split())
seqs = st.lists(words, min_size=1, max_size=8)


@given(seqs, seqs)
def test_lcs_matches_recursive_oracle(a, b):
    assert lcs_length(a, b) == lcs_oracle(tuple(a), tuple(b))


@given(seqs, seqs)
def test_rouge_symmetric_at_beta_one(a, b):
    assert rouge_l_pair(a, [b]) == pytest.approx(rouge_l_pair(b, [a]), abs=1e-12)


@given(st.lists(st.tuples(seqs, seqs), min_size=2, max_size=6))
def test_random_corpora_match_oracle(raw):
    pairs = [TokenizedPair(c, [r]) for c, r in raw]
    ref = [(c, [r]) for c, r in raw]
    for got, want in zip(bleu(pairs), bleu_oracle(ref)):
        assert got == pytest.approx(want, abs=1e-9)
    assert rouge_l(pairs) == pytest.approx(rouge_l_oracle(ref), abs=1e-9)
    if len({tuple(r) for _, r in raw}) >= 2:
        score = cider_d(pairs)
        assert score == pytest.approx(cider_d_oracle(ref), abs=1e-9)
        assert -1e-12 <= score <= 10.0 + 1e-9


def reports(texts):
    return [ParsedReport.from_text(str(i), t) for i, t in enumerate(texts)]


TRUTH = [
    "the heart is normal in size. no pleural effusion.",
    "mild cardiomegaly. small left pleural effusion.",
    "the lungs are clear. no pneumothorax.",
    "endotracheal tube in place. bibasilar atelectasis.",
    "possible pneumonia in the right lower lobe.",
]


def test_evaluate_identity():
    truth = reports(TRUTH)
    rep = evaluate_nlg(truth, truth)
    assert rep == MetricReport(1.0, 1.0, 1.0, 1.0, 1.0, pytest.approx(10.0, abs=1e-9))


def test_evaluate_empty_candidate():
    truth = reports(TRUTH)
    gen = [ParsedReport(r.id) for r in truth]
    rep = evaluate_nlg(gen, truth)
    assert rep.to_json() == dict.fromkeys(rep.to_json(), 0.0)


def test_evaluate_five_reports_against_oracle():
    truth = reports(TRUTH)
    gen = reports([
        "the heart is normal. no effusion.",
        "cardiomegaly. small pleural effusion.",
        "lungs are clear.",
        "endotracheal tube in place. mild atelectasis.",
        "pneumonia in the right lower lobe.",
    ])
    rep = evaluate_nlg(gen, {r.id: r for r in truth})
    ref = [(g.tokens(), [t.tokens()]) for g, t in zip(gen, truth)]
    want = bleu_oracle(ref) + [rouge_l_oracle(ref), cider_d_oracle(ref)]
    got = [rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4, rep.rougeL, rep.ciderD]
    assert got == pytest.approx(want, abs=1e-9)


def test_evaluate_id_mismatch():
    truth = reports(TRUTH)
    with pytest.raises(KeyError):
        evaluate_nlg([ParsedReport("zz")], truth)

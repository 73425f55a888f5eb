"""Acceptance criteria, one test each. Every test prints a single
PASS/FAIL line; the lines are also repeated in pytest's terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""

import json
import time
from fractions import Fraction
from functools import lru_cache
from itertools import product
from pathlib import Path

import numpy as np
import pytest

import conftest
from oracles import bleu_oracle, cider_d_oracle, finite_difference_gradient, rouge_l_oracle
from radreward.corpus import ParsedReport
from radreward.evaluation import clinical_scores, major_class, run_evaluation
from radreward.labeler import CATEGORIES, FindingCategory as FC, LabelVector, MentionLabel as ML
from radreward.labeler import label_report, load_ruleset
from radreward.metrics import TokenizedPair, bleu, cider_d, rouge_l
from radreward.policy import (
    RewardModel,
    SentenceBank,
    ToyPolicy,
    greedy_decode,
    reinforce_gradient,
    sample,
    train,
)
from radreward.reward import EmaBaselines, RewardConfig, ccr_term, update_baselines

FIXTURES = Path(__file__).parent / "fixtures"


def report(n, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {n}. {name}: {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------------


def test_metric_oracle_equivalence():
    t0 = time.perf_counter()
    raw = json.loads((FIXTURES / "metric_corpus.json").read_text())
    pairs = [TokenizedPair(p["candidate"], p["references"]) for p in raw]
    ref = [(p["candidate"], p["references"]) for p in raw]
    got = bleu(pairs) + [rouge_l(pairs), cider_d(pairs)]
    want = bleu_oracle(ref) + [rouge_l_oracle(ref), cider_d_oracle(ref)]
    err = max(abs(g - w) for g, w in zip(got, want))
    elapsed = time.perf_counter() - t0
    report(1, "metric oracle equivalence", len(pairs) == 20 and err <= 1e-9 and elapsed < 5,
           f"{len(pairs)} pairs, max |diff| {err:.2e} (tol 1e-9), {elapsed:.2f}s (limit 5s)")


# 2 ---------------------------------------------------------------------------------

P, N, U, A = ML.Positive, ML.Negative, ML.Uncertain, ML.Absent
ANALYTIC = {
    (P, P): 1.0, (P, N): 0.0, (P, U): 0.5, (P, A): 0.0,
    (N, P): 0.0, (N, N): 1.0, (N, U): 0.5, (N, A): 1.0,
    (U, P): 0.5, (U, N): 0.5, (U, U): 0.5, (U, A): 0.5,
    (A, P): 0.0, (A, N): 1.0, (A, U): 0.5, (A, A): 1.0,
}


def test_ccr_truth_table():
    wrong = [(a.value, b.value) for a, b in product(ML, repeat=2) if ccr_term(a, b, 0.5) != ANALYTIC[(a, b)]]
    report(2, "CCR truth table", not wrong, f"{16 - len(wrong)}/16 combinations exact" + (f", wrong {wrong}" if wrong else ""))


# 3 ---------------------------------------------------------------------------------


def test_ema_closed_form():
    worst = 0.0
    for r0, r in [(0.0, 1.0), (1.0, 0.0), (0.2, 0.9), (0.75, 0.75)]:
        b = EmaBaselines({FC.Edema: r0})
        for k in range(1, 101):
            b = update_baselines(b, {FC.Edema: r}, 0.95)
            worst = max(worst, abs(abs(b[FC.Edema] - r) - 0.95 ** k * abs(r0 - r)))
    report(3, "EMA closed form", worst <= 1e-12, f"max deviation over k<=100 {worst:.2e} (tol 1e-12)")


# 4 ---------------------------------------------------------------------------------

GRAD_BANK = ["there is mild cardiomegaly", "no pleural effusion", "possible pneumonia"]
GRAD_TRUTH = "there is mild cardiomegaly. no pleural effusion."
GRAD_TL = [[0.3, -0.2, 0.1], [-0.4, 0.2, 0.5]]
GRAD_SL = [0.2, 0.0]


def test_gradient_estimator():
    t0 = time.perf_counter()
    cfg = RewardConfig(lam=10.0)
    policy = ToyPolicy(SentenceBank(GRAD_BANK), GRAD_TL, GRAD_SL)
    rm = RewardModel.for_bank(ParsedReport.from_text("t", GRAD_TRUTH), policy.bank, cfg)

    def combined(ids):
        nlg, terms = rm(policy.realize(ids))
        return nlg + cfg.lam * sum(terms.values())

    # loss gradient is the negative gradient of the expected reward
    exact = -finite_difference_gradient(GRAD_TL, GRAD_SL, combined)

    nlg_base, base_terms = rm(greedy_decode(policy))
    baseline = nlg_base + cfg.lam * sum(EmaBaselines.from_terms(base_terms).values.values())
    rng = np.random.default_rng(0)
    n = 100_000
    acc = np.zeros_like(exact)
    for _ in range(n):
        t = sample(policy, rng)
        acc += reinforce_gradient(policy, t, combined(t.template_ids) - baseline).flat()
    mc = acc / n
    elapsed = time.perf_counter() - t0

    # the last stop logit is structurally inert: both gradients must be exactly 0 there
    structural = exact.size - 1
    rel = [abs(mc[i] - exact[i]) / abs(exact[i]) for i in range(exact.size) if i != structural]
    ok = max(rel) < 0.05 and exact[structural] == 0.0 and mc[structural] == 0.0 and elapsed < 30
    report(4, "gradient estimator", ok,
           f"max relative error {max(rel):.2%} over {len(rel)} coordinates (tol 5%), "
           f"structural zero exact, {elapsed:.1f}s (limit 30s)")


# 5, 6 ------------------------------------------------------------------------------

TOY_BANK = [
    "there is mild cardiomegaly",
    "no pleural effusion or pneumothorax",
    "bibasilar atelectasis is mild",
    "the lungs are clear",
    "mild pleural effusion",
    "there is no pneumothorax",
    "no focal consolidation",
    "possible pneumonia",
    "heart size is normal",
    "endotracheal tube is in place",
]
TOY_TRUTH = "there is mild cardiomegaly. bibasilar atelectasis is mild. no pleural effusion or pneumothorax."
TOY_MAX_STEPS = 4
LAMBDA_DOMINANT = 100.0


@lru_cache(maxsize=None)
def toy_run(lam, seed):
    t0 = time.perf_counter()
    truth = ParsedReport.from_text("truth", TOY_TRUTH)
    cfg = RewardConfig(lam=lam)
    policy = ToyPolicy.init(TOY_BANK, TOY_MAX_STEPS)
    rm = RewardModel.for_bank(truth, policy.bank, cfg)
    res = train(policy, truth, cfg, steps=500, batch=32, lr=0.1, seed=seed, reward_model=rm)
    nlg, terms = rm(res.greedy)
    same_labels = label_report(res.greedy, rm.rules) == rm.truth_labels
    return res, nlg, sum(terms.values()), same_labels, time.perf_counter() - t0


def test_toy_scst_training():
    res, cider, ccr, same, elapsed = toy_run(10.0, 0)
    first, last = res.trace[0].total_mean, res.trace[-1].total_mean
    ok = ccr == 14.0 and same and cider >= 9.0 and last > first and elapsed < 60
    report(5, "toy SCST training", ok,
           f"greedy CCR {ccr:.1f} (need 14.0, labels identical: {same}), CIDEr-D {cider:.3f} (need >= 9.0), "
           f"mean total reward {first:.2f} -> {last:.2f}, {elapsed:.1f}s (limit 60s)")


def test_ablation_direction():
    rows = []
    for seed in range(5):
        _, c0, r0, _, _ = toy_run(0.0, seed)
        _, cd, rd, _, _ = toy_run(LAMBDA_DOMINANT, seed)
        rows.append((seed, c0, cd, r0, rd, c0 >= cd and rd >= r0))
    ok = all(r[-1] for r in rows)
    detail = "; ".join(f"seed {s}: CIDEr {c0:.2f}>={cd:.2f}, CCR {rd:.0f}>={r0:.0f}" for s, c0, cd, r0, rd, _ in rows)
    report(6, f"ablation direction (lambda 0 vs {LAMBDA_DOMINANT:g})", ok, detail)


def test_nlg_only_run_reaches_truth_cider():
    _, cider, _, _, _ = toy_run(0.0, 0)
    assert cider >= 0.95 * 10


def test_ccr_dominant_run_matches_truth_labels():
    res, _, _, _, _ = toy_run(LAMBDA_DOMINANT, 0)
    rules = load_ruleset()
    got = label_report(res.greedy, rules)
    want = label_report(ParsedReport.from_text("t", TOY_TRUTH), rules)
    assert sum(got[c] == want[c] for c in CATEGORIES) >= 13


def test_training_never_ends_below_its_start():
    for lam in (0.0, 10.0, LAMBDA_DOMINANT):
        for seed in range(5 if lam != 10.0 else 1):
            res = toy_run(lam, seed)[0]
            assert res.trace[-1].total_mean >= res.trace[0].total_mean


# 7 ---------------------------------------------------------------------------------


def test_labeler_suite():
    rules = load_ruleset()
    cases = json.loads((FIXTURES / "labeler_suite.json").read_text())
    wrong = []
    for case in cases:
        want = LabelVector({FC[k]: ML[v] for k, v in case["labels"].items()})
        if label_report(ParsedReport.from_text("s", case["text"]), rules) != want:
            wrong.append(case["text"])
    report(7, "labeler suite", len(cases) == 30 and not wrong,
           f"{len(cases) - len(wrong)}/{len(cases)} sentences exact" + (f", wrong {wrong}" if wrong else ""))


# 8 ---------------------------------------------------------------------------------


def test_major_class_identity():
    rng = np.random.default_rng(167)
    n = 1200
    draws = rng.random((n, len(CATEGORIES))) < 1 / 6
    truth = [LabelVector({c: P if draws[i, j] else N for j, c in enumerate(CATEGORIES)}) for i in range(n)]
    acc = clinical_scores(major_class(truth), truth).accuracy_macro
    prevalence = float(sum(Fraction(int((~draws[:, j]).sum()), n) for j in range(len(CATEGORIES))) / len(CATEGORIES))
    ok = abs(acc - prevalence) <= 1e-15 and abs(acc - 5 / 6) <= 0.01
    report(8, "major-class identity", ok,
           f"accuracy_macro {acc:.6f} vs negative prevalence {prevalence:.6f}, target 0.833 +/- 0.01")


# 9 ---------------------------------------------------------------------------------


def test_end_to_end_golden(tmp_path):
    eval5 = FIXTURES / "eval5"
    run_evaluation(eval5 / "generated.jsonl", eval5 / "truth.jsonl", tmp_path)
    names = ["nlg_metrics.json", "clinical_scores.json", "per_category.csv"]
    diff = [n for n in names if (tmp_path / n).read_bytes() != (eval5 / "golden" / n).read_bytes()]
    report(9, "end-to-end golden run", not diff,
           f"{len(names) - len(diff)}/{len(names)} files byte-identical" + (f", differ: {diff}" if diff else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))

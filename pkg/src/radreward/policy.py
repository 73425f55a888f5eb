"""Toy sentence-level generator trained with REINFORCE.

Each step picks one template from a fixed bank (softmax over per-step
logits) and then draws a Bernoulli stop signal. A chosen template emits its
tokens deterministically, so the word-level likelihood term is zero and the
score function has only the template and stop parts. The stop draw on the
last allowed step is forced (stop, probability 1) and carries no gradient.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import ParsedReport, Sentence, split_sentences
from .labeler import FindingCategory, LabelVector, RuleSet, label_report, load_ruleset
from .metrics import IdfContext
from .reward import (
    EmaBaselines,
    RewardConfig,
    assemble_bundle,
    ccr_reward,
    nlg_reward,
    update_baselines,
)

log = logging.getLogger(__name__)


def _sentence(s) -> Sentence:
    if isinstance(s, Sentence):
        return s
    if isinstance(s, str):
        sents = split_sentences(s)
        if len(sents) != 1:
            raise ValueError(f"template must be exactly one sentence: {s!r}")
        return sents[0]
    return Sentence(tuple(s))


class SentenceBank(tuple):
    """Ordered, non-empty tuple of template Sentences."""

    def __new__(cls, templates):
        items = tuple(_sentence(t) for t in templates)
        if not items:
            raise ValueError("sentence bank must not be empty")
        return super().__new__(cls, items)

    @classmethod
    def load(cls, path) -> "SentenceBank":
        """JSON-lines, one ``{"text": ...}`` or ``{"tokens": [...]}`` per template."""
        templates = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                if "tokens" in obj:
                    templates.append(obj["tokens"])
                elif "text" in obj:
                    templates.append(obj["text"])
                else:
                    raise ValueError(f"{path}:{lineno}: template needs 'text' or 'tokens'")
        return cls(templates)


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


class Gradient(NamedTuple):
    template_logits: np.ndarray
    stop_logits: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.template_logits.ravel(), self.stop_logits.ravel()])

    def __add__(self, other):
        return Gradient(self.template_logits + other.template_logits, self.stop_logits + other.stop_logits)

    def scale(self, k: float) -> "Gradient":
        return Gradient(self.template_logits * k, self.stop_logits * k)


@dataclass(frozen=True, eq=False)
class ToyPolicy:
    bank: SentenceBank
    template_logits: np.ndarray  # [max_steps, len(bank)]
    stop_logits: np.ndarray  # [max_steps]

    def __post_init__(self):
        object.__setattr__(self, "bank", SentenceBank(self.bank))
        t = _readonly(self.template_logits)
        s = _readonly(self.stop_logits)
        if t.ndim != 2 or t.shape[1] != len(self.bank) or t.shape[0] < 1:
            raise ValueError(f"template_logits must be [max_steps, {len(self.bank)}], got {t.shape}")
        if s.shape != (t.shape[0],):
            raise ValueError(f"stop_logits must have shape ({t.shape[0]},), got {s.shape}")
        if not (np.isfinite(t).all() and np.isfinite(s).all()):
            raise ValueError("policy parameters must be finite")
        object.__setattr__(self, "template_logits", t)
        object.__setattr__(self, "stop_logits", s)

    @classmethod
    def init(cls, bank, max_steps: int, stop_logit: float = 0.0) -> "ToyPolicy":
        bank = SentenceBank(bank)
        return cls(bank, np.zeros((max_steps, len(bank))), np.full(max_steps, float(stop_logit)))

    @property
    def max_steps(self) -> int:
        return self.template_logits.shape[0]

    @cached_property
    def template_log_probs(self) -> np.ndarray:
        t = self.template_logits
        return t - np.logaddexp.reduce(t, axis=1, keepdims=True)

    @cached_property
    def template_cdf(self) -> np.ndarray:
        return np.cumsum(np.exp(self.template_log_probs), axis=1)

    @cached_property
    def stop_probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.stop_logits))

    def log_prob_stop(self, step: int, stop: bool) -> float:
        if step == self.max_steps - 1:
            return 0.0
        x = self.stop_logits[step]
        return float(_log_sigmoid(x) if stop else _log_sigmoid(-x))

    def realize(self, template_ids: Sequence[int], report_id: str = "generated") -> ParsedReport:
        return ParsedReport(report_id, tuple(self.bank[k] for k in template_ids))

    def updated(self, grad: Gradient, lr: float) -> "ToyPolicy":
        """Descent step on the loss gradient ``grad``."""
        with np.errstate(over="ignore", invalid="ignore"):
            t = self.template_logits - lr * grad.template_logits
            s = self.stop_logits - lr * grad.stop_logits
        return ToyPolicy(self.bank, t, s)

    def to_json(self) -> dict:
        return {
            "bank": [list(s.tokens) for s in self.bank],
            "template_logits": self.template_logits.tolist(),
            "stop_logits": self.stop_logits.tolist(),
        }

    @classmethod
    def from_json(cls, obj) -> "ToyPolicy":
        return cls(SentenceBank(obj["bank"]), obj["template_logits"], obj["stop_logits"])


class Step(NamedTuple):
    template_id: int
    stop: bool
    log_prob_template: float
    log_prob_stop: float


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    report: ParsedReport

    @property
    def template_ids(self) -> tuple[int, ...]:
        return tuple(s.template_id for s in self.steps)

    @property
    def log_prob(self) -> float:
        return sum(s.log_prob_template + s.log_prob_stop for s in self.steps)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample(policy: ToyPolicy, seed=None) -> Trajectory:
    """Draw one trajectory. ``seed`` may be an int, a SeedSequence or a Generator."""
    rng = _rng(seed)
    k_max = len(policy.bank) - 1
    steps = []
    for i in range(policy.max_steps):
        k = min(int(np.searchsorted(policy.template_cdf[i], rng.random(), side="right")), k_max)
        last = i == policy.max_steps - 1
        stop = True if last else bool(rng.random() < policy.stop_probs[i])
        steps.append(Step(k, stop, float(policy.template_log_probs[i, k]), policy.log_prob_stop(i, stop)))
        if stop:
            break
    return Trajectory(tuple(steps), policy.realize([s.template_id for s in steps]))


def greedy_decode(policy: ToyPolicy, report_id: str = "greedy") -> ParsedReport:
    ids = []
    for i in range(policy.max_steps):
        ids.append(int(np.argmax(policy.template_logits[i])))  # first index wins ties
        if policy.stop_logits[i] > 0.0:  # sigmoid(x) > 0.5
            break
    return policy.realize(ids, report_id)


def beam_decode(policy: ToyPolicy, beam_size: int = 4, report_id: str = "beam") -> ParsedReport:
    """Most probable template sequence found by beam search over trajectories."""
    live = [(0.0, ())]
    finished = []
    lp_t = policy.template_log_probs
    for i in range(policy.max_steps):
        last = i == policy.max_steps - 1
        grown = []
        for score, ids in live:
            for k in range(len(policy.bank)):
                base = score + float(lp_t[i, k])
                finished.append((base + policy.log_prob_stop(i, True), ids + (k,)))
                if not last:
                    grown.append((base + policy.log_prob_stop(i, False), ids + (k,)))
        grown.sort(key=lambda h: (-h[0], h[1]))
        live = grown[:beam_size]
        finished.sort(key=lambda h: (-h[0], h[1]))
        finished = finished[:beam_size]
        if not live or (len(finished) == beam_size and finished[-1][0] >= live[0][0]):
            break
    return policy.realize(finished[0][1], report_id)


def score_function(policy: ToyPolicy, traj: Trajectory) -> Gradient:
    """Gradient of the trajectory log-probability w.r.t. the policy parameters."""
    g_t = np.zeros_like(policy.template_logits)
    g_s = np.zeros_like(policy.stop_logits)
    probs = np.exp(policy.template_log_probs)
    for i, step in enumerate(traj.steps):
        g_t[i] -= probs[i]
        g_t[i, step.template_id] += 1.0
        if i < policy.max_steps - 1:
            p = policy.stop_probs[i]
            g_s[i] = (1.0 - p) if step.stop else -p
    return Gradient(g_t, g_s)


def reinforce_gradient(policy: ToyPolicy, traj: Trajectory, advantage: float) -> Gradient:
    """Loss gradient ``-advantage * d log p(traj) / d theta``."""
    if not np.isfinite(advantage):
        raise ValueError("advantage must be finite")
    if advantage == 0.0:
        return Gradient(np.zeros_like(policy.template_logits), np.zeros_like(policy.stop_logits))
    return score_function(policy, traj).scale(-advantage)


# -- training -----------------------------------------------------------------------


class RewardModel:
    """Memoised rewards of realized reports against one ground truth."""

    def __init__(self, truth: ParsedReport, cfg: RewardConfig, rules: RuleSet, idf: IdfContext):
        self.truth = truth
        self.cfg = cfg
        self.rules = rules
        self.idf = idf
        self.truth_labels = label_report(truth, rules)
        self._cache: dict[tuple, tuple[float, dict]] = {}

    @classmethod
    def for_bank(cls, truth, bank, cfg=RewardConfig(), rules=None) -> "RewardModel":
        """IDF documents: the truth plus every bank template on its own."""
        rules = rules or load_ruleset()
        docs = [[truth.tokens()]] + [[list(s.tokens)] for s in bank]
        return cls(truth, cfg, rules, IdfContext(docs))

    def labels(self, report: ParsedReport) -> LabelVector:
        return label_report(report, self.rules)

    def __call__(self, report: ParsedReport) -> tuple[float, dict[FindingCategory, float]]:
        key = tuple(s.tokens for s in report.sentences)
        hit = self._cache.get(key)
        if hit is None:
            nlg = nlg_reward(report, self.truth, self.idf, self.cfg.sigma)
            terms, _ = ccr_reward(self.labels(report), self.truth_labels, self.cfg)
            hit = self._cache[key] = (nlg, terms)
        return hit


@dataclass
class TraceRow:
    step: int
    nlg_mean: float
    ccr_mean: float
    total_mean: float


@dataclass
class TrainResult:
    policy: ToyPolicy
    trace: list[TraceRow]
    baselines: EmaBaselines | None
    greedy: ParsedReport = field(init=False)

    def __post_init__(self):
        self.greedy = greedy_decode(self.policy)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "nlg_mean", "ccr_mean", "total_mean"])
        for r in self.trace:
            w.writerow([r.step, repr(r.nlg_mean), repr(r.ccr_mean), repr(r.total_mean)])
        return buf.getvalue()


def rollout_seed(seed: int, step: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, step, index])


def train(
    policy: ToyPolicy,
    truth: ParsedReport,
    cfg: RewardConfig = RewardConfig(),
    steps: int = 500,
    batch: int = 32,
    lr: float = 0.1,
    seed: int = 0,
    rules: RuleSet | None = None,
    reward_model: RewardModel | None = None,
) -> TrainResult:
    """Self-critical REINFORCE with per-category EMA baselines.

    Each step: greedy-decode the current policy (NLG baseline), draw ``batch``
    rollouts, average their loss gradients, take one descent step, then move
    the EMA baselines toward the batch-mean CCR terms. The trace has
    ``steps + 1`` rows; the last row is an evaluation batch drawn with the
    final parameters.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if steps < 1 or batch < 1:
        raise ValueError("steps and batch must be >= 1")
    rm = reward_model or RewardModel.for_bank(truth, policy.bank, cfg, rules)
    baselines: EmaBaselines | None = None
    trace: list[TraceRow] = []

    for step in range(steps + 1):
        trajs = [sample(policy, rollout_seed(seed, step, j)) for j in range(batch)]
        rewards = [rm(t.report) for t in trajs]
        nlg_mean = float(np.mean([r[0] for r in rewards]))
        ccr_mean = float(np.mean([sum(r[1].values()) for r in rewards]))
        trace.append(TraceRow(step, nlg_mean, ccr_mean, nlg_mean + cfg.lam * ccr_mean))
        if step == steps:
            break

        mean_terms = {c: float(np.mean([r[1][c] for r in rewards])) for c in cfg.categories}
        if baselines is None:
            baselines = EmaBaselines.from_terms(mean_terms)
        nlg_base, _ = rm(greedy_decode(policy))

        grad = None
        for traj, (nlg, terms) in zip(trajs, rewards):
            bundle = assemble_bundle(terms, nlg, nlg_base, baselines, cfg.lam)
            g = reinforce_gradient(policy, traj, bundle.combined_advantage)
            grad = g if grad is None else grad + g
        grad = grad.scale(1.0 / batch)

        try:
            policy = policy.updated(grad, lr)
        except ValueError:
            raise FloatingPointError(
                f"non-finite policy parameters after step {step} "
                f"(max |grad| = {np.abs(grad.flat()).max():.3g}, lr = {lr})"
            ) from None
        baselines = update_baselines(baselines, mean_terms, cfg.gamma)
        if step % 100 == 0:
            log.debug("step %d: nlg %.3f ccr %.3f", step, nlg_mean, ccr_mean)

    return TrainResult(policy, trace, baselines)

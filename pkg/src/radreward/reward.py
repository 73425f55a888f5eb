"""Clinically coherent reward, per-category EMA baselines and the combined
self-critical advantage used for policy-gradient training."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

from .corpus import ParsedReport
from .labeler import CATEGORIES, OBSERVATIONS, FindingCategory, LabelVector, MentionLabel
from .metrics import IdfContext, cider_d_pair


@dataclass(frozen=True)
class StateDistribution:
    p_pos: float

    @property
    def p_neg(self) -> float:
        return 1.0 - self.p_pos


@dataclass(frozen=True)
class RewardConfig:
    beta_u: float = 0.5
    gamma: float = 0.95
    lam: float = 10.0
    include_no_finding: bool = True
    sigma: float = 6.0

    def __post_init__(self):
        if not 0.0 <= self.beta_u <= 1.0:
            raise ValueError("beta_u must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def categories(self) -> tuple[FindingCategory, ...]:
        return CATEGORIES if self.include_no_finding else OBSERVATIONS

    @classmethod
    def from_json(cls, obj: Mapping) -> "RewardConfig":
        known = {"beta_u", "gamma", "lambda", "include_no_finding", "sigma"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown reward config keys: {sorted(unknown)}")
        kw = {k: obj[k] for k in ("beta_u", "gamma", "include_no_finding", "sigma") if k in obj}
        if "lambda" in obj:
            kw["lam"] = float(obj["lambda"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RewardConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return {
            "beta_u": self.beta_u,
            "gamma": self.gamma,
            "lambda": self.lam,
            "include_no_finding": self.include_no_finding,
            "sigma": self.sigma,
        }


def state_dist(label: MentionLabel, beta_u: float = 0.5) -> StateDistribution:
    if not 0.0 <= beta_u <= 1.0:
        raise ValueError("beta_u must lie in [0, 1]")
    if label is MentionLabel.Positive:
        return StateDistribution(1.0)
    if label is MentionLabel.Uncertain:
        return StateDistribution(beta_u)
    return StateDistribution(0.0)


def ccr_term(l_gen: MentionLabel, l_true: MentionLabel, beta_u: float = 0.5) -> float:
    """Agreement between the disease-state distributions two labels imply."""
    a = state_dist(l_gen, beta_u)
    b = state_dist(l_true, beta_u)
    return a.p_pos * b.p_pos + a.p_neg * b.p_neg


def ccr_reward(gen: LabelVector, truth: LabelVector, cfg: RewardConfig = RewardConfig()):
    """Per-category terms and their sum over ``cfg.categories``."""
    terms = {c: ccr_term(gen[c], truth[c], cfg.beta_u) for c in cfg.categories}
    return terms, sum(terms.values())


@dataclass(frozen=True)
class EmaBaselines:
    values: Mapping[FindingCategory, float]

    @classmethod
    def from_terms(cls, terms: Mapping[FindingCategory, float]) -> "EmaBaselines":
        return cls(dict(terms))

    def __getitem__(self, cat):
        return self.values[cat]


def update_baselines(b: EmaBaselines | None, terms: Mapping[FindingCategory, float], gamma: float = 0.95) -> EmaBaselines:
    """One EMA step per category. ``None`` (no history yet) adopts ``terms`` as-is."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if b is None:
        return EmaBaselines.from_terms(terms)
    return EmaBaselines({c: gamma * b.values[c] + (1.0 - gamma) * r for c, r in terms.items()})


def nlg_reward(report: ParsedReport, truth: ParsedReport, idf: IdfContext, sigma: float = 6.0) -> float:
    return cider_d_pair(report.tokens(), [truth.tokens()], idf, sigma)


def nlg_advantage(sampled: ParsedReport, greedy: ParsedReport, truth: ParsedReport, idf: IdfContext, sigma: float = 6.0) -> float:
    return nlg_reward(sampled, truth, idf, sigma) - nlg_reward(greedy, truth, idf, sigma)


@dataclass(frozen=True)
class RewardBundle:
    ccr_terms: Mapping[FindingCategory, float]
    ccr_total: float
    nlg_reward: float
    nlg_baseline_reward: float
    combined_advantage: float
    baselines: Mapping[FindingCategory, float] = field(default_factory=dict)

    @property
    def nlg_advantage(self) -> float:
        return self.nlg_reward - self.nlg_baseline_reward

    def total_reward(self, lam: float) -> float:
        return self.nlg_reward + lam * self.ccr_total

    def to_json(self) -> dict:
        d = asdict(self)
        d["ccr_terms"] = {c.name: v for c, v in self.ccr_terms.items()}
        d["baselines"] = {c.name: v for c, v in self.baselines.items()}
        d["nlg_advantage"] = self.nlg_advantage
        return d


def assemble_bundle(
    terms: Mapping[FindingCategory, float],
    nlg: float,
    nlg_base: float,
    baselines: EmaBaselines,
    lam: float,
) -> RewardBundle:
    ccr_adv = sum(terms[c] - baselines[c] for c in terms)
    return RewardBundle(
        ccr_terms=dict(terms),
        ccr_total=sum(terms.values()),
        nlg_reward=nlg,
        nlg_baseline_reward=nlg_base,
        combined_advantage=(nlg - nlg_base) + lam * ccr_adv,
        baselines={c: baselines[c] for c in terms},
    )


def combined_advantage(
    sampled: ParsedReport,
    greedy: ParsedReport,
    truth: ParsedReport,
    labels_gen: LabelVector,
    labels_true: LabelVector,
    baselines: EmaBaselines,
    cfg: RewardConfig,
    idf: IdfContext,
) -> RewardBundle:
    """Reward bundle for one sampled report. Baselines are read, not updated."""
    terms, _ = ccr_reward(labels_gen, labels_true, cfg)
    nlg = nlg_reward(sampled, truth, idf, cfg.sigma)
    nlg_base = nlg_reward(greedy, truth, idf, cfg.sigma)
    return assemble_bundle(terms, nlg, nlg_base, baselines, cfg.lam)

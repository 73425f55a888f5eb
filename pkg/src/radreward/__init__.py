"""Evaluation and reward toolkit for radiology report generation."""

from .corpus import ParsedReport, RawReport, Sentence, Vocabulary
from .labeler import CATEGORIES, FindingCategory, LabelVector, MentionLabel, RuleSet, label_report, load_ruleset
from .metrics import IdfContext, MetricReport, TokenizedPair, evaluate_nlg
from .reward import EmaBaselines, RewardBundle, RewardConfig, ccr_reward, ccr_term, combined_advantage

__version__ = "0.1.0"

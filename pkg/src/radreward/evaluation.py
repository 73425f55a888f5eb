"""Clinical-efficacy scoring, reference baselines and the evaluation run."""

from __future__ import annotations

import csv
import enum
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import ParsedReport, dedupe_sentences, read_parsed_reports
from .labeler import CATEGORIES, LabelVector, MentionLabel, RuleSet, label_report, load_ruleset
from .metrics import MetricReport, evaluate_nlg

FLOAT_DIGITS = 6


class BinaryOutcome(enum.Enum):
    Pos = 1
    Neg = 0


class UncertainPolicy(str, enum.Enum):
    AS_POS = "u-as-pos"
    AS_NEG = "u-as-neg"

    @classmethod
    def parse(cls, value) -> "UncertainPolicy":
        if isinstance(value, cls):
            return value
        aliases = {"pos": cls.AS_POS, "neg": cls.AS_NEG}
        return aliases.get(value) or cls(value)


def binarize(label: MentionLabel, policy=UncertainPolicy.AS_POS) -> BinaryOutcome:
    if label is MentionLabel.Positive:
        return BinaryOutcome.Pos
    if label is MentionLabel.Uncertain and UncertainPolicy.parse(policy) is UncertainPolicy.AS_POS:
        return BinaryOutcome.Pos
    return BinaryOutcome.Neg


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self):
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self):
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.n if self.n else 0.0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class ClinicalScores:
    accuracy_macro: float
    precision_macro: float
    precision_micro: float
    recall_macro: float
    recall_micro: float
    counts: Mapping  # FindingCategory -> ConfusionCounts

    def per_category(self):
        """Rows of (category, truth positive count, precision, recall, accuracy)."""
        return [
            (c, cc.tp + cc.fn, cc.precision, cc.recall, cc.accuracy) for c, cc in self.counts.items()
        ]

    def to_json(self) -> dict:
        r = lambda x: round(x, FLOAT_DIGITS)
        return {
            "accuracy_macro": r(self.accuracy_macro),
            "precision_macro": r(self.precision_macro),
            "precision_micro": r(self.precision_micro),
            "recall_macro": r(self.recall_macro),
            "recall_micro": r(self.recall_micro),
            "per_category": {
                c.display: {**asdict(cc), "precision": r(cc.precision), "recall": r(cc.recall),
                            "accuracy": r(cc.accuracy)}
                for c, cc in self.counts.items()
            },
        }


def _align(gen, truth):
    if isinstance(gen, Mapping) or isinstance(truth, Mapping):
        if not (isinstance(gen, Mapping) and isinstance(truth, Mapping)):
            raise TypeError("pass both label sets as mappings or both as sequences")
        missing = sorted(set(gen) ^ set(truth))
        if missing:
            raise KeyError(f"label ids differ between generated and truth: {', '.join(missing[:5])}")
        ids = list(gen)
        return [gen[i] for i in ids], [truth[i] for i in ids]
    if len(gen) != len(truth):
        raise ValueError(f"length mismatch: {len(gen)} generated vs {len(truth)} truth")
    return list(gen), list(truth)


def confusion(gen, truth, policy=UncertainPolicy.AS_POS, categories=CATEGORIES) -> dict:
    gen, truth = _align(gen, truth)
    out = {}
    for c in categories:
        tp = fp = tn = fn = 0
        for g, t in zip(gen, truth):
            pg = binarize(g[c], policy) is BinaryOutcome.Pos
            pt = binarize(t[c], policy) is BinaryOutcome.Pos
            if pg and pt:
                tp += 1
            elif pg:
                fp += 1
            elif pt:
                fn += 1
            else:
                tn += 1
        out[c] = ConfusionCounts(tp, fp, tn, fn)
    return out


def clinical_scores(gen, truth, policy=UncertainPolicy.AS_POS, categories=CATEGORIES) -> ClinicalScores:
    """Per-category and macro/micro precision, recall and accuracy.

    Zero denominators score 0, which penalises never predicting a finding.
    """
    gen, truth = _align(gen, truth)
    if not gen:
        raise ValueError("clinical_scores needs at least one report")
    counts = confusion(gen, truth, policy, categories)
    pooled = sum(counts.values(), ConfusionCounts())
    k = len(counts)
    return ClinicalScores(
        accuracy_macro=sum(c.accuracy for c in counts.values()) / k,
        precision_macro=sum(c.precision for c in counts.values()) / k,
        precision_micro=pooled.precision,
        recall_macro=sum(c.recall for c in counts.values()) / k,
        recall_micro=pooled.recall,
        counts=counts,
    )


def major_class(truth):
    """All-Negative predictions, shaped like ``truth`` (mapping or sequence)."""
    neg = LabelVector.uniform(MentionLabel.Negative)
    if isinstance(truth, Mapping):
        return {k: neg for k in truth}
    return [neg for _ in truth]


# -- nearest neighbour ----------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: tuple[float, ...]

    def __post_init__(self):
        v = tuple(float(x) for x in self.vector)
        if not all(np.isfinite(v)):
            raise ValueError(f"embedding {self.id!r} has non-finite entries")
        object.__setattr__(self, "vector", v)


def read_embeddings(path) -> list[EmbeddingRecord]:
    """CSV with header ``id,v0,...,v{D-1}``."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or header[1:] != [f"v{i}" for i in range(len(header) - 1)]:
            raise ValueError(f"{path}:1: expected header id,v0,...,v{{D-1}}")
        dim = len(header) - 1
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(row) - 1}")
            try:
                records.append(EmbeddingRecord(row[0], tuple(float(x) for x in row[1:])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return records


def nearest_neighbor(query: EmbeddingRecord, train: Sequence[EmbeddingRecord], metric: str = "euclidean") -> str:
    """Id of the closest train record; ties go to the lexicographically lowest id."""
    if not train:
        raise ValueError("empty train set")
    X = np.array([r.vector for r in train], dtype=float)
    q = np.array(query.vector, dtype=float)
    if X.ndim != 2 or X.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: query has {q.shape[0]}, train has {X.shape[1:]}")
    if metric == "euclidean":
        d = np.sqrt(((X - q) ** 2).sum(axis=1))
    elif metric == "cosine":
        denom = np.linalg.norm(X, axis=1) * np.linalg.norm(q)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = 1.0 - np.where(denom > 0, X @ q / denom, 0.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    best = d.min()
    return min(r.id for r, di in zip(train, d) if di == best)


def nearest_neighbor_reports(queries, train, train_reports: Mapping[str, ParsedReport], metric="euclidean"):
    """1-NN baseline: each query gets its neighbour's report under the query id."""
    out = []
    for q in queries:
        hit = train_reports[nearest_neighbor(q, train, metric)]
        out.append(ParsedReport(q.id, hit.sentences, hit.view))
    return out


# -- evaluation run ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    u_as: UncertainPolicy = UncertainPolicy.AS_POS
    dedupe: bool = True
    cider_sigma: float = 6.0
    rouge_beta: float = 1.0

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalConfig":
        unknown = set(obj) - {"u_as", "dedupe", "cider_sigma", "rouge_beta"}
        if unknown:
            raise ValueError(f"unknown evaluation config keys: {sorted(unknown)}")
        kw = dict(obj)
        if "u_as" in kw:
            kw["u_as"] = UncertainPolicy.parse(kw["u_as"])
        return cls(**kw)


@dataclass
class EvaluationResult:
    nlg: MetricReport
    clinical: ClinicalScores

    def files(self) -> dict[str, str]:
        nlg = {k: round(v, FLOAT_DIGITS) for k, v in self.nlg.to_json().items()}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "count", "precision", "recall", "accuracy"])
        for cat, count, p, r, a in self.clinical.per_category():
            w.writerow([cat.display, count, f"{p:.{FLOAT_DIGITS}f}", f"{r:.{FLOAT_DIGITS}f}", f"{a:.{FLOAT_DIGITS}f}"])
        return {
            "nlg_metrics.json": json.dumps(nlg, indent=2) + "\n",
            "clinical_scores.json": json.dumps(self.clinical.to_json(), indent=2) + "\n",
            "per_category.csv": buf.getvalue(),
        }


def evaluate_reports(
    generated: Sequence[ParsedReport],
    truth: Sequence[ParsedReport],
    rules: RuleSet,
    cfg: EvalConfig = EvalConfig(),
) -> EvaluationResult:
    truth_by_id = {r.id: r for r in truth}
    missing = [g.id for g in generated if g.id not in truth_by_id]
    if missing:
        raise KeyError(f"generated ids missing from truth: {', '.join(missing[:5])}")
    if not generated:
        raise ValueError("no generated reports to evaluate")
    if cfg.dedupe:
        generated = [dedupe_sentences(g) for g in generated]
    nlg = evaluate_nlg(generated, truth_by_id, cfg.cider_sigma, cfg.rouge_beta)
    gen_labels = {g.id: label_report(g, rules) for g in generated}
    true_labels = {g.id: label_report(truth_by_id[g.id], rules) for g in generated}
    return EvaluationResult(nlg, clinical_scores(gen_labels, true_labels, cfg.u_as))


def write_atomically(out_dir, files: Mapping[str, str]) -> None:
    """Write every file to a temp name first, then rename them all into place."""
    os.makedirs(out_dir, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.chmod(tmp, 0o644)
            staged.append((tmp, os.path.join(out_dir, name)))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def run_evaluation(generated_path, truth_path, out_dir, rules_path=None, config=None) -> EvaluationResult:
    """Score a generated corpus against the truth and write the result files.

    Nothing is written unless every stage succeeds.
    """
    cfg = config if isinstance(config, EvalConfig) else EvalConfig.from_json(config or {})
    rules = load_ruleset(rules_path)
    result = evaluate_reports(read_parsed_reports(generated_path), read_parsed_reports(truth_path), rules, cfg)
    write_atomically(out_dir, result.files())
    return result

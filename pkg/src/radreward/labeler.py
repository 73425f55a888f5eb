"""Rule-based finding labeler.

Phrases are matched as token sequences (``*`` matches any single token).
A match is Uncertain when an uncertainty cue is within ``window`` tokens on
either side, else Negative when a pre-negation cue precedes it (or a
post-negation cue follows it) within the window, else Positive. Cue scope
never crosses a sentence or a terminator token.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping, Sequence

import jsonschema

from .corpus import ParsedReport, Sentence, tokenize

log = logging.getLogger(__name__)

WILDCARD = "*"


class FindingCategory(enum.Enum):
    NoFinding = "No Finding"
    EnlargedCardiomediastinum = "Enlarged Cardiomediastinum"
    Cardiomegaly = "Cardiomegaly"
    LungLesion = "Lung Lesion"
    AirspaceOpacity = "Airspace Opacity"
    Edema = "Edema"
    Consolidation = "Consolidation"
    Pneumonia = "Pneumonia"
    Atelectasis = "Atelectasis"
    Pneumothorax = "Pneumothorax"
    PleuralEffusion = "Pleural Effusion"
    PleuralOther = "Pleural Other"
    Fracture = "Fracture"
    SupportDevices = "Support Devices"

    @property
    def display(self):
        return self.value


CATEGORIES: tuple[FindingCategory, ...] = tuple(FindingCategory)
OBSERVATIONS = CATEGORIES[1:]


class MentionLabel(enum.Enum):
    Positive = "p"
    Negative = "n"
    Uncertain = "u"
    Absent = "a"


# aggregation precedence, strongest first
_PRECEDENCE = {
    MentionLabel.Positive: 3,
    MentionLabel.Uncertain: 2,
    MentionLabel.Negative: 1,
    MentionLabel.Absent: 0,
}

_CSV_VALUE = {
    MentionLabel.Positive: "1.0",
    MentionLabel.Negative: "0.0",
    MentionLabel.Uncertain: "-1.0",
    MentionLabel.Absent: "",
}


class LabelVector(Mapping[FindingCategory, MentionLabel]):
    """Total, immutable map from every FindingCategory to a MentionLabel."""

    __slots__ = ("_labels",)

    def __init__(self, labels: Mapping[FindingCategory, MentionLabel] | None = None, **by_name):
        merged = {c: MentionLabel.Absent for c in CATEGORIES}
        merged.update(labels or {})
        for name, lab in by_name.items():
            merged[FindingCategory[name]] = lab
        self._labels = tuple(merged[c] for c in CATEGORIES)

    def __getitem__(self, cat):
        return self._labels[CATEGORIES.index(cat)]

    def __iter__(self):
        return iter(CATEGORIES)

    def __len__(self):
        return len(CATEGORIES)

    def __eq__(self, other):
        if isinstance(other, LabelVector):
            return self._labels == other._labels
        return NotImplemented

    def __hash__(self):
        return hash(self._labels)

    def __repr__(self):
        body = ", ".join(
            f"{c.name}={l.name}" for c, l in zip(CATEGORIES, self._labels) if l is not MentionLabel.Absent
        )
        return f"LabelVector({body})"

    def as_tuple(self) -> tuple[MentionLabel, ...]:
        return self._labels

    @classmethod
    def uniform(cls, label: MentionLabel) -> "LabelVector":
        return cls({c: label for c in CATEGORIES})


@dataclass(frozen=True)
class RuleSet:
    window: int
    pre_neg: tuple[tuple[str, ...], ...]
    post_neg: tuple[tuple[str, ...], ...]
    uncertain: tuple[tuple[str, ...], ...]
    patterns: Mapping[FindingCategory, tuple[tuple[str, ...], ...]]
    terminators: frozenset[str] = frozenset()

    def __eq__(self, other):
        if not isinstance(other, RuleSet):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __hash__(self):
        return hash(json.dumps(self.to_json(), sort_keys=True))

    def to_json(self) -> dict:
        join = " ".join
        return {
            "window": self.window,
            "pre_neg": [join(c) for c in self.pre_neg],
            "post_neg": [join(c) for c in self.post_neg],
            "uncertain": [join(c) for c in self.uncertain],
            "terminators": sorted(self.terminators),
            "patterns": {
                c.name: [join(p) for p in self.patterns[c]] for c in OBSERVATIONS if c in self.patterns
            },
        }


class RuleSetError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid rule set:\n  " + "\n  ".join(self.errors))


_STR_LIST = {"type": "array", "items": {"type": "string", "minLength": 1}}
RULESET_SCHEMA = {
    "type": "object",
    "required": ["window", "pre_neg", "post_neg", "uncertain", "patterns"],
    "additionalProperties": False,
    "properties": {
        "window": {"type": "integer", "minimum": 1},
        "pre_neg": {**_STR_LIST, "minItems": 1},
        "post_neg": {**_STR_LIST, "minItems": 1},
        "uncertain": {**_STR_LIST, "minItems": 1},
        "terminators": _STR_LIST,
        "patterns": {"type": "object", "additionalProperties": _STR_LIST},
    },
}


def ruleset_from_json(obj) -> RuleSet:
    """Validate ``obj`` and build a RuleSet; every violation is reported at once."""
    errors = [
        f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
        for e in sorted(jsonschema.Draft7Validator(RULESET_SCHEMA).iter_errors(obj), key=str)
    ]
    patterns = obj.get("patterns") if isinstance(obj, dict) else None
    compiled = {}
    if isinstance(patterns, dict):
        for name in patterns:
            if name not in FindingCategory.__members__:
                errors.append(f"patterns/{name}: unknown category")
            elif name == FindingCategory.NoFinding.name:
                errors.append("patterns/NoFinding: NoFinding is derived and takes no patterns")
        for cat in OBSERVATIONS:
            raw = patterns.get(cat.name)
            if not raw:
                errors.append(f"patterns/{cat.name}: at least one pattern required")
                continue
            if not isinstance(raw, list):
                continue
            seqs = []
            for p in raw:
                toks = tuple(tokenize(p)) if isinstance(p, str) else ()
                if not toks:
                    continue
                if toks in seqs:
                    warnings.warn(f"duplicate pattern {p!r} for {cat.name}", stacklevel=2)
                seqs.append(toks)
            compiled[cat] = tuple(seqs)
    if errors:
        raise RuleSetError(errors)

    def cues(key):
        return tuple(tuple(tokenize(c)) for c in obj[key] if tokenize(c))

    return RuleSet(
        window=obj["window"],
        pre_neg=cues("pre_neg"),
        post_neg=cues("post_neg"),
        uncertain=cues("uncertain"),
        patterns=compiled,
        terminators=frozenset(t for term in obj.get("terminators", []) for t in tokenize(term)),
    )


def load_ruleset(path=None) -> RuleSet:
    """Load a rule file; ``None`` loads the bundled default rules."""
    if path is None:
        text = resources.files("radreward").joinpath("data/default_rules.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RuleSetError([f"{path}: invalid JSON ({exc.msg})"]) from None
    return ruleset_from_json(obj)


def save_ruleset(rs: RuleSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(rs.to_json(), fh, indent=2)
        fh.write("\n")


# -- matching -------------------------------------------------------------------


def _seq_matches(tokens, i, pat):
    if i + len(pat) > len(tokens):
        return False
    return all(p == WILDCARD or p == tokens[i + k] for k, p in enumerate(pat))


def _find_all(tokens, pats):
    """All (start, end) spans of any pattern in ``pats``."""
    spans = []
    for i in range(len(tokens)):
        for p in pats:
            if _seq_matches(tokens, i, p):
                spans.append((i, i + len(p)))
    return spans


def _leftmost_longest(spans):
    spans = sorted(spans, key=lambda s: (s[0], -(s[1] - s[0])))
    kept, last_end = [], -1
    for s, e in spans:
        if s >= last_end:
            kept.append((s, e))
            last_end = e
    return kept


def _blocked(tokens, lo, hi, terminators):
    return any(t in terminators for t in tokens[lo:hi])


def label_sentence(sentence: Sentence | Sequence[str], rs: RuleSet) -> list[tuple[FindingCategory, MentionLabel]]:
    tokens = sentence.tokens if isinstance(sentence, Sentence) else tuple(sentence)
    mentions = []
    for cat in OBSERVATIONS:
        for s, e in _leftmost_longest(_find_all(tokens, rs.patterns.get(cat, ()))):
            mentions.append((s, cat, e))
    if not mentions:
        return []

    pre = _find_all(tokens, rs.pre_neg)
    post = _find_all(tokens, rs.post_neg)
    unc = _find_all(tokens, rs.uncertain)
    w, term = rs.window, rs.terminators

    def inside(spans, s, e):
        # cue caught by a wildcard slot, e.g. "heart is not enlarged" via "heart * * enlarged"
        return any(cs >= s and ce <= e for cs, ce in spans)

    def before(spans, s):
        return any(ce <= s and s - ce <= w and not _blocked(tokens, ce, s, term) for _, ce in spans)

    def after(spans, e):
        return any(cs >= e and cs - e <= w and not _blocked(tokens, e, cs, term) for cs, _ in spans)

    out = []
    for s, cat, e in sorted(mentions, key=lambda m: (m[0], m[1].name)):
        if before(unc, s) or after(unc, e) or inside(unc, s, e):
            label = MentionLabel.Uncertain
        elif before(pre, s) or after(post, e) or inside(pre, s, e):
            label = MentionLabel.Negative
        else:
            label = MentionLabel.Positive
        out.append((cat, label))
    return out


def label_report(report: ParsedReport, rs: RuleSet) -> LabelVector:
    best = {c: MentionLabel.Absent for c in OBSERVATIONS}
    for sent in report.sentences:
        for cat, lab in label_sentence(sent, rs):
            if _PRECEDENCE[lab] > _PRECEDENCE[best[cat]]:
                best[cat] = lab
    clean = all(l in (MentionLabel.Absent, MentionLabel.Negative) for l in best.values())
    nf = MentionLabel.Positive if clean and report.sentences else MentionLabel.Negative
    return LabelVector({FindingCategory.NoFinding: nf, **best})


# -- CSV ---------------------------------------------------------------------------

# alternative column names found in third-party CheXpert exports
_ALIASES = {"Lung Opacity": FindingCategory.AirspaceOpacity}
_FROM_CSV = {"1.0": MentionLabel.Positive, "1": MentionLabel.Positive,
             "0.0": MentionLabel.Negative, "0": MentionLabel.Negative,
             "-1.0": MentionLabel.Uncertain, "-1": MentionLabel.Uncertain,
             "": MentionLabel.Absent}


def labels_to_csv(rows: Iterable[tuple[str, LabelVector]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", *(c.display for c in CATEGORIES)])
    for rid, vec in rows:
        writer.writerow([rid, *(_CSV_VALUE[l] for l in vec.as_tuple())])
    return buf.getvalue()


def read_labels_csv(path) -> dict[str, LabelVector]:
    """Read a label CSV keyed by its first column (``id`` or ``Reports``)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty label file") from None
        cols = {}
        for j, name in enumerate(header[1:], 1):
            name = name.strip()
            cat = _ALIASES.get(name)
            if cat is None:
                try:
                    cat = FindingCategory(name)
                except ValueError:
                    cat = FindingCategory.__members__.get(name)
            if cat is None:
                raise ValueError(f"{path}:1: unknown label column {name!r}")
            cols[j] = cat
        out = {}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            labels = {}
            for j, cat in cols.items():
                raw = row[j].strip() if j < len(row) else ""
                if raw not in _FROM_CSV:
                    raise ValueError(f"{path}:{lineno}: bad label value {raw!r} for {cat.display}")
                labels[cat] = _FROM_CSV[raw]
            out[row[0]] = LabelVector(labels)
    return out

"""Report ingestion: section parsing, tokenization, sentence splitting,
vocabulary building and duplicate-sentence removal."""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

DEFAULT_HEADINGS = (
    "findings",
    "impression",
    "history",
    "examination",
    "comparison",
    "indication",
    "technique",
)

# Whole-uppercase tokens emitted by de-identification; these survive lowercasing.
PLACEHOLDERS = frozenset(
    {"NAME", "DATE", "TIME", "AGE", "LOCATION", "HOSPITAL", "PHONE", "UNK"}
)
UNK = "UNK"
VIEWS = ("AP", "PA", "LL", "UNKNOWN")

_TOKEN_RE = re.compile(r"\d+(?:\.\d+)+|\w+|[^\w\s]")
# a terminator is a boundary unless it sits between two digits
_SENT_END_RE = re.compile(r"(?<!\d)[.!?]|[.!?](?!\d)")


@dataclass(frozen=True)
class RawReport:
    id: str
    text: str
    view: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("report id must be non-empty")
        if self.view is not None and self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}; expected one of {VIEWS}")


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("a sentence needs at least one token")
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self):
        return len(self.tokens)

    def __str__(self):
        return " ".join(self.tokens)


@dataclass(frozen=True)
class ParsedReport:
    id: str
    sentences: tuple[Sentence, ...] = ()
    view: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))

    @classmethod
    def from_token_lists(cls, id, sentences, view=None):
        return cls(id, tuple(Sentence(tuple(s)) for s in sentences if s), view)

    @classmethod
    def from_text(cls, id, text, view=None):
        """Build a report directly from findings text."""
        return cls(id, tuple(split_sentences(text)), view)

    def tokens(self) -> list[str]:
        """All tokens, sentences concatenated in order."""
        return [t for s in self.sentences for t in s.tokens]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "sentences": [list(s.tokens) for s in self.sentences],
            "view": self.view,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ParsedReport":
        return cls.from_token_lists(obj["id"], obj.get("sentences", []), obj.get("view"))


@dataclass(frozen=True)
class Vocabulary:
    """Frozen token to id map. The unknown token always has id 0."""

    token_to_id: Mapping[str, int]
    min_count: int
    unk_token: str = UNK
    counts: Mapping[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.token_to_id[self.unk_token]
        return [self.token_to_id.get(t, unk) for t in tokens]

    def replace_unknown(self, report: ParsedReport) -> ParsedReport:
        sents = [
            [t if t in self.token_to_id else self.unk_token for t in s.tokens]
            for s in report.sentences
        ]
        return ParsedReport.from_token_lists(report.id, sents, report.view)

    def to_json(self) -> dict:
        tokens = sorted(self.token_to_id, key=self.token_to_id.__getitem__)
        return {"min_count": self.min_count, "unk_token": self.unk_token, "tokens": tokens}


def _heading_regex(headings: Sequence[str]) -> re.Pattern:
    names = sorted((h.strip() for h in headings), key=len, reverse=True)
    alt = "|".join(r"\s+".join(map(re.escape, n.split())) for n in names)
    # heading at a line start, or right after a sentence terminator
    return re.compile(
        rf"(?:^|(?<=[.!?])|(?<=\n))[ \t]*(?P<name>{alt})[ \t]*:",
        re.IGNORECASE | re.MULTILINE,
    )


def parse_sections(raw: RawReport | str, headings: Sequence[str] = DEFAULT_HEADINGS) -> dict[str, str]:
    """Split a report into a ``{section-name: text}`` map.

    Section names are lowercased. Text before the first recognised heading is
    dropped. XML payloads (Open-I style ``<AbstractText Label="...">``) are
    read from their pre-parsed sections instead of heading detection.
    """
    text = raw.text if isinstance(raw, RawReport) else raw
    if text.lstrip().startswith("<"):
        try:
            return parse_sections_xml(text, headings)
        except ET.ParseError:
            pass

    matches = list(_heading_regex(headings).finditer(text))
    sections: dict[str, str] = {}
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        name = " ".join(m.group("name").lower().split())
        body = " ".join(text[m.end():end].split())
        sections[name] = f"{sections[name]} {body}".strip() if name in sections else body
    return sections


def parse_sections_xml(payload: str, headings: Sequence[str] = DEFAULT_HEADINGS) -> dict[str, str]:
    root = ET.fromstring(payload)
    wanted = {" ".join(h.lower().split()) for h in headings}
    sections: dict[str, str] = {}
    for node in root.iter("AbstractText"):
        label = " ".join((node.get("Label") or "").lower().split())
        if label not in wanted:
            continue
        body = " ".join("".join(node.itertext()).split())
        sections[label] = f"{sections[label]} {body}".strip() if label in sections else body
    return sections


def tokenize(text: str, placeholders: frozenset[str] = PLACEHOLDERS) -> list[str]:
    out = []
    for tok in _TOKEN_RE.findall(text):
        out.append(tok if tok in placeholders else tok.lower())
    return out


def split_sentences(text: str, placeholders: frozenset[str] = PLACEHOLDERS) -> list[Sentence]:
    """Split findings text on ``.``, ``!`` and ``?`` (not inside decimals).

    Terminators are dropped; an unterminated trailing sentence is kept.
    """
    sentences = []
    start = 0
    for m in _SENT_END_RE.finditer(text):
        toks = tokenize(text[start:m.start()], placeholders)
        if toks:
            sentences.append(Sentence(tuple(toks)))
        start = m.end()
    toks = tokenize(text[start:], placeholders)
    if toks:
        sentences.append(Sentence(tuple(toks)))
    return sentences


def parse_report(raw: RawReport, headings: Sequence[str] = DEFAULT_HEADINGS) -> ParsedReport | None:
    """Findings section of ``raw`` as a ParsedReport, or None if it has none."""
    sections = parse_sections(raw, headings)
    if "findings" not in sections:
        return None
    return ParsedReport(raw.id, tuple(split_sentences(sections["findings"])), raw.view)


def build_vocabulary(reports: Iterable[ParsedReport], min_count: int = 5, unk_token: str = UNK) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for r in reports:
        counts.update(r.tokens())
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t != unk_token),
        key=lambda t: (-counts[t], t),
    )
    token_to_id = {unk_token: 0}
    for t in kept:
        token_to_id[t] = len(token_to_id)
    return Vocabulary(token_to_id, min_count, unk_token, dict(counts))


def dedupe_sentences(report: ParsedReport) -> ParsedReport:
    seen = set()
    kept = []
    for s in report.sentences:
        if s.tokens not in seen:
            seen.add(s.tokens)
            kept.append(s)
    return ParsedReport(report.id, tuple(kept), report.view)


# -- JSON-lines I/O -----------------------------------------------------------


class CorpusFormatError(ValueError):
    """Malformed input; the message carries ``path:line`` context."""


def iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusFormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def read_raw_reports(path) -> list[RawReport]:
    reports = []
    for lineno, obj in iter_jsonl(path):
        try:
            reports.append(RawReport(str(obj["id"]), obj.get("text") or "", obj.get("view")))
        except (KeyError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
    return reports


def read_parsed_reports(path) -> list[ParsedReport]:
    reports = []
    for lineno, obj in iter_jsonl(path):
        try:
            reports.append(ParsedReport.from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
    return reports


def dumps_parsed(reports: Iterable[ParsedReport]) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in reports)

"""Corpus-level BLEU-1..4, ROUGE-L and CIDEr-D over token sequences."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .corpus import ParsedReport

Tokens = Sequence[str]


@dataclass(frozen=True)
class TokenizedPair:
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __init__(self, candidate: Tokens, references: Iterable[Tokens]):
        refs = tuple(tuple(r) for r in references)
        if not refs:
            raise ValueError("a pair needs at least one reference")
        object.__setattr__(self, "candidate", tuple(candidate))
        object.__setattr__(self, "references", refs)


@dataclass(frozen=True)
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rougeL: float
    ciderD: float

    def to_json(self) -> dict:
        return asdict(self)


class DegenerateIdfError(ValueError):
    """Raised when fewer than two distinct reference documents define the IDF."""


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(pairs):
    if not pairs:
        raise ValueError("metric requires at least one pair")


def bleu(pairs: Sequence[TokenizedPair], n_max: int = 4) -> list[float]:
    """Corpus BLEU-1..``n_max`` (unsmoothed, closest reference length)."""
    _check(pairs)
    if not 1 <= n_max <= 4:
        raise ValueError("n_max must be in 1..4")
    matched = [0] * n_max
    total = [0] * n_max
    c_len = r_len = 0
    for pair in pairs:
        cand = pair.candidate
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in pair.references)[1]
        for n in range(1, n_max + 1):
            cand_counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for ref in pair.references:
                max_ref |= ngrams(ref, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)

    if c_len == 0:
        return [0.0] * n_max
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for n in range(n_max):
        if matched[n] == 0:
            # zero precision at this order zeroes this and every higher order
            scores.extend([0.0] * (n_max - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Tokens, b: Tokens) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Tokens, references: Iterable[Tokens], beta: float = 1.0) -> float:
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(pairs: Sequence[TokenizedPair], beta: float = 1.0) -> float:
    _check(pairs)
    return sum(rouge_l_pair(p.candidate, p.references, beta) for p in pairs) / len(pairs)


class IdfContext:
    """Document frequencies of 1..4-grams over a reference corpus.

    Each document is one reference *set* (all references of one item);
    an n-gram counts once per document.
    """

    def __init__(self, documents: Iterable[Iterable[Tokens]], n: int = 4):
        self.n = n
        self.doc_freq: Counter = Counter()
        distinct = set()
        n_docs = 0
        for refs in documents:
            refs = [tuple(r) for r in refs]
            distinct.add(tuple(sorted(refs)))
            grams = set()
            for ref in refs:
                for k in range(1, n + 1):
                    grams.update(ngrams(ref, k))
            self.doc_freq.update(grams)
            n_docs += 1
        if len(distinct) < 2:
            raise DegenerateIdfError(
                f"CIDEr-D needs at least 2 distinct reference documents, got {len(distinct)}"
            )
        self.n_docs = n_docs
        self.log_n = math.log(float(n_docs))

    @classmethod
    def from_pairs(cls, pairs: Sequence[TokenizedPair], n: int = 4) -> "IdfContext":
        return cls((p.references for p in pairs), n)

    @classmethod
    def from_reports(cls, reports: Iterable[ParsedReport], n: int = 4) -> "IdfContext":
        return cls(([r.tokens()] for r in reports), n)

    def vectorize(self, tokens: Tokens):
        """Per-order TF-IDF dicts and their L2 norms."""
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            vec = {
                g: tf * (self.log_n - math.log(max(1.0, self.doc_freq.get(g, 0.0))))
                for g, tf in ngrams(tokens, k).items()
            }
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms


def cider_d_pair(candidate: Tokens, references: Iterable[Tokens], idf: IdfContext, sigma: float = 6.0) -> float:
    """CIDEr-D of one candidate against its references, already scaled by 10."""
    references = list(references)
    c_vecs, c_norms = idf.vectorize(candidate)
    total = 0.0
    for ref in references:
        r_vecs, r_norms = idf.vectorize(ref)
        delta = len(candidate) - len(ref)
        penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
        score = 0.0
        for cv, cn, rv, rn in zip(c_vecs, c_norms, r_vecs, r_norms):
            if cn == 0.0 or rn == 0.0:
                continue
            dot = sum(min(v, rv[g]) * rv[g] for g, v in cv.items() if g in rv)
            score += dot / (cn * rn) * penalty
        total += score / idf.n
    return 10.0 * total / len(references)


def cider_d(pairs: Sequence[TokenizedPair], sigma: float = 6.0, idf: IdfContext | None = None) -> float:
    _check(pairs)
    if idf is None:
        idf = IdfContext.from_pairs(pairs)
    return sum(cider_d_pair(p.candidate, p.references, idf, sigma) for p in pairs) / len(pairs)


def report_pairs(generated: Sequence[ParsedReport], truth: Sequence[ParsedReport] | Mapping[str, ParsedReport]):
    by_id = truth if isinstance(truth, Mapping) else {r.id: r for r in truth}
    missing = [g.id for g in generated if g.id not in by_id]
    if missing:
        raise KeyError(f"generated ids missing from truth: {', '.join(missing[:5])}")
    return [TokenizedPair(g.tokens(), [by_id[g.id].tokens()]) for g in generated]


def evaluate_nlg(
    generated: Sequence[ParsedReport],
    truth: Sequence[ParsedReport] | Mapping[str, ParsedReport],
    sigma: float = 6.0,
    rouge_beta: float = 1.0,
) -> MetricReport:
    pairs = report_pairs(generated, truth)
    b = bleu(pairs, 4)
    return MetricReport(*b, rouge_l(pairs, rouge_beta), cider_d(pairs, sigma))

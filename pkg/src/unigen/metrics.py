"""Retrieval and answer-quality metrics.

Retrieval side: reciprocal rank and recall at a cutoff. Answer side: BLEU-1,
ROUGE-L, exact match, and token-level F1. EM and F1 score over the full answer
normalization (articles removed); BLEU-1 and ROUGE-L tokenize with the light
rule only (lowercase, punctuation stripped), which keeps "the cat" a two-token
candidate the way the overlap measures expect.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

_PUNCT_RE = re.compile(r"[^\w\s]")
_ARTICLES = {"a", "an", "the"}


def light_tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation to spaces, split on whitespace."""
    return _PUNCT_RE.sub(" ", text.lower()).split()


def normalize_answer(text: str) -> str:
    """Canonical answer form: lowercase, no punctuation, no articles, single spaces."""
    tokens = [t for t in light_tokenize(text) if t not in _ARTICLES]
    return " ".join(tokens)


@dataclass(frozen=True)
class MetricConfig:
    """Cutoffs and knobs shared by the evaluation harness."""

    k_values: tuple[int, ...] = (1, 5, 10)
    rouge_beta: float = 1.0
    normalization: str = "default"

    def __post_init__(self):
        if not self.k_values:
            raise ValueError("k_values must be non-empty")
        if any(k < 1 for k in self.k_values):
            raise ValueError("k values must be >= 1")
        if tuple(sorted(self.k_values)) != tuple(self.k_values):
            raise ValueError("k values must be sorted ascending")
        if self.rouge_beta <= 0:
            raise ValueError("rouge_beta must be positive")
        if self.normalization != "default":
            raise ValueError(f"unknown normalization rule: {self.normalization!r}")

    @property
    def max_k(self) -> int:
        return self.k_values[-1]


def reciprocal_rank_at_k(ranking: Sequence[str], relevant: Iterable[str], k: int) -> float:
    """1/rank of the first relevant doc within the top k, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    for i, doc_id in enumerate(ranking[:k]):
        if doc_id in relevant:
            return 1.0 / (i + 1)
    return 0.0


def recall_at_k(ranking: Sequence[str], relevant: Iterable[str], k: int) -> float:
    """|relevant in top-k| / |relevant|. Reduces to hit@k for a single relevant doc."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = sum(1 for doc_id in ranking[:k] if doc_id in relevant)
    return hits / len(relevant)


def bleu1(candidate: str, references: Sequence[str]) -> float:
    """Clipped unigram precision times the brevity penalty.

    BP = min(1, exp(1 - r/c)) with r the reference length closest to the
    candidate length c (ties broken toward the shorter reference).
    """
    if not references:
        raise ValueError("references must be non-empty")
    cand = light_tokenize(candidate)
    c = len(cand)
    if c == 0:
        return 0.0
    ref_tokens = [light_tokenize(r) for r in references]

    cand_counts = Counter(cand)
    max_ref_counts: Counter = Counter()
    for ref in ref_tokens:
        rc = Counter(ref)
        for tok, n in rc.items():
            if n > max_ref_counts[tok]:
                max_ref_counts[tok] = n
    clipped = sum(min(n, max_ref_counts[tok]) for tok, n in cand_counts.items())
    precision = clipped / c

    r = min((len(ref) for ref in ref_tokens), key=lambda length: (abs(length - c), length))
    bp = min(1.0, math.exp(1.0 - r / c))
    return precision * bp


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # Classic O(len(a)*len(b)) table, rolling rows.
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = 1.0) -> float:
    """LCS F-measure: (1+beta^2)PR / (R + beta^2 P)."""
    cand = light_tokenize(candidate)
    ref = light_tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    """1 iff the normalized prediction equals some normalized gold."""
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def token_f1(prediction: str, golds: Sequence[str]) -> float:
    """Max over golds of the harmonic mean of token precision and recall.

    Both sides empty after normalization scores 1 (nothing to get wrong);
    exactly one side empty scores 0.
    """
    pred_tokens = normalize_answer(prediction).split()
    best = 0.0
    for gold in golds:
        gold_tokens = normalize_answer(gold).split()
        if not pred_tokens and not gold_tokens:
            score = 1.0
        elif not pred_tokens or not gold_tokens:
            score = 0.0
        else:
            overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
            if overlap == 0:
                score = 0.0
            else:
                p = overlap / len(pred_tokens)
                r = overlap / len(gold_tokens)
                score = 2 * p * r / (p + r)
        best = max(best, score)
    return best

"""Inference: trie-constrained beam search for docids, greedy answer decoding.

A docid's score is the sum of per-token log-probabilities under the
retrieval head, taken literally as log relevance. Ranking uses the raw sum
(no length normalization by default: identifier texts are near-uniform in
length, and raw sums keep hypothesis scores equal to score_sequence).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BOS_ID, EOS_ID
from .docid_trie import DocidTrie
from .model import (
    QA_HEAD,
    RETRIEVAL_HEAD,
    EncoderState,
    ModelError,
    UniGenModel,
    decode_step,
    decode_step_batch,
)


class DecodingError(ValueError):
    pass


@dataclass(frozen=True)
class BeamHypothesis:
    """A BOS-rooted partial identifier; tokens[1:] is always an accepted trie prefix."""

    tokens: tuple[int, ...]
    log_score: float
    trie_node: int
    complete: bool


@dataclass(frozen=True)
class RetrievalResult:
    """Distinct doc_ids with log-scores, sorted non-increasing."""

    ranking: tuple[tuple[str, float], ...]

    def __post_init__(self):
        ids = [doc_id for doc_id, _ in self.ranking]
        if len(set(ids)) != len(ids):
            raise DecodingError("retrieval ranking repeats a doc_id")
        scores = [s for _, s in self.ranking]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise DecodingError("retrieval ranking is not sorted by score")

    def __iter__(self):
        return iter(self.ranking)

    def __len__(self):
        return len(self.ranking)

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.ranking]


def constrained_beam_search(
    model: UniGenModel,
    encoder_state: EncoderState,
    trie: DocidTrie,
    beam_size: int = 10,
    max_len: int | None = None,
    length_normalize: bool = False,
) -> RetrievalResult:
    """Beam search where each step only considers trie-legal continuations.

    Per step, every candidate extension of every live hypothesis is ranked by
    (score, then lexicographic tokens). Candidates inside the overall top
    beam_size that land on a terminal node move to a completed pool; the live
    beam becomes the top beam_size non-terminal candidates. Finished
    hypotheses therefore never occupy live slots. Search stops once beam_size
    hypotheses are complete, the live beam empties, or max_len tokens have
    been generated.

    length_normalize divides each completed score by its token count for the
    final ranking (and reports that normalized value); hypothesis scores
    during the search stay raw sums.
    """
    if beam_size < 1:
        raise DecodingError("beam_size must be >= 1")
    if len(trie) == 0:
        raise DecodingError("empty trie")
    limit = trie.max_depth if max_len is None else max_len
    limit = min(limit, model.config.max_output_len)

    live = [BeamHypothesis(tokens=(BOS_ID,), log_score=0.0, trie_node=trie.root, complete=False)]
    completed: list[BeamHypothesis] = []
    for _ in range(limit):
        logps = decode_step_batch(model, RETRIEVAL_HEAD, encoder_state, [h.tokens for h in live])
        candidates = []
        for h, row in zip(live, logps):
            for tok, node in trie.children(h.trie_node).items():
                candidates.append(
                    BeamHypothesis(
                        tokens=h.tokens + (tok,),
                        log_score=h.log_score + float(row[tok]),
                        trie_node=node,
                        complete=trie.is_terminal(node),
                    )
                )
        candidates.sort(key=lambda c: (-c.log_score, c.tokens))
        completed.extend(c for c in candidates[:beam_size] if c.complete)
        live = [c for c in candidates if not c.complete][:beam_size]
        if len(completed) >= beam_size or not live:
            break

    def final_score(h: BeamHypothesis) -> float:
        if length_normalize:
            return h.log_score / max(1, len(h.tokens) - 1)
        return h.log_score

    completed.sort(key=lambda h: (-final_score(h), h.tokens))
    ranking = tuple(
        (trie.resolve(h.tokens[1:]), final_score(h)) for h in completed[:beam_size]
    )
    return RetrievalResult(ranking=ranking)


def score_sequence(model: UniGenModel, encoder_state: EncoderState, docid_tokens) -> float:
    """Sum of log f(token_i | prefix, input) under the retrieval head."""
    toks = [int(t) for t in docid_tokens]
    if not toks:
        raise DecodingError("empty docid sequence")
    if toks[-1] != EOS_ID:
        raise DecodingError("docid sequence must be EOS-terminated")
    prefixes = [(BOS_ID, *toks[:i]) for i in range(len(toks))]
    logps = decode_step_batch(model, RETRIEVAL_HEAD, encoder_state, prefixes)
    return float(sum(logps[i][tok] for i, tok in enumerate(toks)))


def greedy_decode(model: UniGenModel, head: str, encoder_state: EncoderState, max_len: int = 32) -> list[int]:
    """Argmax decoding (ties to the lowest token id) until EOS or max_len tokens."""
    if max_len < 1:
        raise DecodingError("max_len must be >= 1")
    if head not in (RETRIEVAL_HEAD, QA_HEAD):
        raise ModelError(f"unknown head {head!r}")
    limit = min(max_len, model.config.max_output_len)
    prefix = [BOS_ID]
    out: list[int] = []
    for _ in range(limit):
        logp = decode_step(model, head, encoder_state, prefix)
        tok = int(np.argmax(logp))
        if tok == EOS_ID:
            break
        out.append(tok)
        prefix.append(tok)
    return out

"""Prefix tree over document-identifier token sequences.

The trie is the legality oracle for constrained decoding: a generated prefix
is legal iff it walks from the root, and a sequence names a document iff it
ends on a terminal node (the EOS edge). Identifier texts are disambiguated
before tokenization so every document owns a distinct sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import EOS_ID, tokenize


class TrieError(ValueError):
    """Sequence-set violations: duplicates, missing EOS, bad paths."""


class UnresolvableSequenceError(TrieError):
    """Token sequence does not spell a complete root-to-terminal path."""


@dataclass(frozen=True)
class DocidSequence:
    """A document's generable identifier: token ids ending in exactly one EOS."""

    doc_id: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise TrieError(f"{self.doc_id!r}: empty identifier sequence")
        if self.tokens[-1] != EOS_ID:
            raise TrieError(f"{self.doc_id!r}: identifier sequence must end with EOS")
        if self.tokens.count(EOS_ID) != 1:
            raise TrieError(f"{self.doc_id!r}: EOS must appear exactly once")


def disambiguate(connector_texts: Mapping[str, str]) -> dict[str, str]:
    """Make identifier texts tokenize to pairwise-distinct sequences.

    Texts that collide after normalization get a "#k" suffix token, k counting
    up from 2 in doc_id lexicographic order; the first occurrence is unchanged.
    Idempotent: already-distinct inputs come back as-is.
    """
    token_key = {doc_id: tuple(tokenize(text)) for doc_id, text in connector_texts.items()}
    groups: dict[tuple[str, ...], list[str]] = {}
    for doc_id in sorted(token_key):
        groups.setdefault(token_key[doc_id], []).append(doc_id)
    taken = set(token_key.values())

    out = dict(connector_texts)
    for key, doc_ids in groups.items():
        if len(doc_ids) == 1:
            continue
        k = 2
        for doc_id in doc_ids[1:]:
            while key + (f"#{k}",) in taken:
                k += 1
            taken.add(key + (f"#{k}",))
            out[doc_id] = f"{connector_texts[doc_id]} #{k}".strip()
            k += 1
    return out


def sequences_from_connectors(connectors: Mapping[str, str], vocab) -> list[DocidSequence]:
    """Encode (already disambiguated) identifier texts into EOS-terminated sequences."""
    seqs = [
        DocidSequence(doc_id=doc_id, tokens=tuple(vocab.encode(text)) + (EOS_ID,))
        for doc_id, text in connectors.items()
    ]
    by_tokens: dict[tuple[int, ...], str] = {}
    for s in seqs:
        if s.tokens in by_tokens:
            raise TrieError(
                f"identifier sequences collide after encoding: {by_tokens[s.tokens]!r} vs {s.doc_id!r} "
                "(vocabulary likely drops connector words to UNK; build it with the connector texts included)"
            )
        by_tokens[s.tokens] = s.doc_id
    return seqs


class DocidTrie:
    """Contiguous node store; children held as per-node dicts token->node index."""

    def __init__(self):
        self._children: list[dict[int, int]] = [{}]
        self._doc_ids: list[str | None] = [None]
        self._num_sequences = 0
        self._max_depth = 0

    # -- construction

    def insert(self, seq: DocidSequence) -> None:
        node = 0
        for tok in seq.tokens:
            nxt = self._children[node].get(tok)
            if nxt is None:
                nxt = len(self._children)
                self._children[node][tok] = nxt
                self._children.append({})
                self._doc_ids.append(None)
            node = nxt
        if self._doc_ids[node] is not None:
            raise TrieError(f"duplicate identifier sequence for {seq.doc_id!r} (already {self._doc_ids[node]!r})")
        self._doc_ids[node] = seq.doc_id
        self._num_sequences += 1
        self._max_depth = max(self._max_depth, len(seq.tokens))

    # -- queries

    @property
    def root(self) -> int:
        return 0

    def __len__(self) -> int:
        return self._num_sequences

    @property
    def num_nodes(self) -> int:
        return len(self._children)

    @property
    def max_depth(self) -> int:
        return self._max_depth

    def step(self, node: int, token: int) -> int:
        """Child node index, or -1 if the edge does not exist."""
        return self._children[node].get(token, -1)

    def children(self, node: int) -> dict[int, int]:
        return self._children[node]

    def is_terminal(self, node: int) -> bool:
        return self._doc_ids[node] is not None

    def doc_id_at(self, node: int) -> str | None:
        return self._doc_ids[node]

    def node_for_prefix(self, prefix: Sequence[int]) -> int:
        """Node reached by walking prefix from the root, or -1."""
        node = 0
        for tok in prefix:
            node = self._children[node].get(int(tok), -1)
            if node < 0:
                return -1
        return node

    def allowed_next(self, prefix: Sequence[int]) -> set[int]:
        """Legal continuations of prefix; empty for absent prefixes and terminals."""
        node = self.node_for_prefix(prefix)
        if node < 0:
            return set()
        return set(self._children[node])

    def resolve(self, tokens: Sequence[int]) -> str:
        node = self.node_for_prefix(tokens)
        if node < 0 or not self.is_terminal(node):
            raise UnresolvableSequenceError(f"unresolvable sequence: {list(tokens)}")
        return self._doc_ids[node]  # type: ignore[return-value]

    def sequences(self) -> list[DocidSequence]:
        """All inserted sequences, recovered by depth-first walk."""
        out: list[DocidSequence] = []
        stack: list[tuple[int, tuple[int, ...]]] = [(0, ())]
        while stack:
            node, path = stack.pop()
            doc_id = self._doc_ids[node]
            if doc_id is not None:
                out.append(DocidSequence(doc_id=doc_id, tokens=path))
            for tok in sorted(self._children[node], reverse=True):
                stack.append((self._children[node][tok], path + (tok,)))
        return out


def build_trie(sequences: Iterable[DocidSequence]) -> DocidTrie:
    """Trie containing exactly the given (pairwise distinct, EOS-terminated) sequences."""
    trie = DocidTrie()
    for seq in sequences:
        trie.insert(seq)
    return trie


def allowed_next(trie: DocidTrie, prefix: Sequence[int]) -> set[int]:
    return trie.allowed_next(prefix)


def resolve(trie: DocidTrie, tokens: Sequence[int]) -> str:
    return trie.resolve(tokens)


def save_sequences(sequences: Iterable[DocidSequence], path: str | Path) -> None:
    """Canonical serialization: rebuild-from-sequences is the load path."""
    with open(path, "w", encoding="utf-8") as f:
        for s in sequences:
            f.write(json.dumps({"doc_id": s.doc_id, "tokens": list(s.tokens)}) + "\n")


def load_sequences(path: str | Path) -> list[DocidSequence]:
    out: list[DocidSequence] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(DocidSequence(doc_id=obj["doc_id"], tokens=tuple(obj["tokens"])))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise TrieError(f"{path}:{lineno}: bad sequence record") from e
    return out

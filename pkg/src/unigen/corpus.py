"""Data model, tokenization, and persistence.

Documents, queries, connector texts, vocabularies, and run files all live
here. Tokenization is deliberately plain word-level: lowercase, punctuation
stripped to spaces (except '#', which survives so disambiguation suffix
tokens like "#2" stay intact), split on whitespace. Everything is immutable
after load/build and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)

_STRIP_RE = re.compile(r"[^\w\s#]")


class CorpusError(ValueError):
    """Malformed corpus/query/connector/run data."""


def normalize_text(text: str) -> str:
    return " ".join(_STRIP_RE.sub(" ", text.lower()).split())


def tokenize(text: str) -> list[str]:
    """Normalized word tokens; pure and deterministic."""
    return normalize_text(text).split()


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: str | None = None

    def __post_init__(self):
        if not self.doc_id:
            raise CorpusError("doc_id must be non-empty")
        if not self.text:
            raise CorpusError(f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    query: str
    answer: str | None = None
    relevant_doc_ids: frozenset[str] = frozenset()
    q_connector: str | None = None

    def __post_init__(self):
        if not self.query_id:
            raise CorpusError("query_id must be non-empty")
        object.__setattr__(self, "relevant_doc_ids", frozenset(self.relevant_doc_ids))


class Corpus:
    """Id-indexed document store plus the per-document connector texts."""

    def __init__(self, documents: Iterable[Document] = (), d_connectors: Mapping[str, str] | None = None):
        self._docs: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in self._docs:
                raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
            self._docs[doc.doc_id] = doc
        self.d_connectors: dict[str, str] = dict(d_connectors or {})
        unknown = set(self.d_connectors) - set(self._docs)
        if unknown:
            raise CorpusError(f"connectors for unknown doc ids: {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def __iter__(self):
        return iter(self._docs.values())

    @property
    def doc_ids(self) -> list[str]:
        return list(self._docs)

    def get(self, doc_id: str) -> Document:
        try:
            return self._docs[doc_id]
        except KeyError:
            raise CorpusError(f"unknown doc_id {doc_id!r}") from None

    def set_connectors(self, d_connectors: Mapping[str, str]) -> None:
        unknown = set(d_connectors) - set(self._docs)
        if unknown:
            raise CorpusError(f"connectors for unknown doc ids: {sorted(unknown)}")
        self.d_connectors = dict(d_connectors)


class Vocabulary:
    """Token<->id map with fixed reserved ids PAD=0, UNK=1, BOS=2, EOS=3."""

    def __init__(self, token_to_id: Mapping[str, int]):
        for tok, want in zip(RESERVED_TOKENS, range(4)):
            if token_to_id.get(tok) != want:
                raise CorpusError(f"reserved token {tok!r} must have id {want}")
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        if len(self.id_to_token) != len(self.token_to_id):
            raise CorpusError("token->id map is not injective")

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def encode(self, text: str, add_bos_eos: bool = False) -> list[int]:
        ids = [self.token_to_id.get(tok, UNK_ID) for tok in tokenize(text)]
        if add_bos_eos:
            return [BOS_ID, *ids, EOS_ID]
        return ids

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        toks = []
        for i in ids:
            tok = self.id_to_token.get(int(i), UNK_TOKEN)
            if skip_special and tok in (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN):
                continue
            toks.append(tok)
        return " ".join(toks)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, i in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                f.write(json.dumps({"token": tok, "id": i}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        mapping: dict[str, int] = {}
        for lineno, obj in _iter_jsonl(path):
            try:
                mapping[obj["token"]] = int(obj["id"])
            except (KeyError, TypeError) as e:
                raise CorpusError(f"{path}:{lineno}: bad vocabulary record") from e
        return cls(mapping)


def build_vocab(texts: Iterable[str], min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    """Frequency-filtered vocabulary, most frequent first, lexicographic ties.

    max_size caps the total size including the 4 reserved tokens.
    """
    if min_freq < 1:
        raise CorpusError("min_freq must be >= 1")
    if max_size is not None and max_size < len(RESERVED_TOKENS):
        raise CorpusError(f"max_size must be >= {len(RESERVED_TOKENS)}")
    freqs: dict[str, int] = {}
    for text in texts:
        for tok in tokenize(text):
            freqs[tok] = freqs.get(tok, 0) + 1
    kept = sorted(
        ((tok, n) for tok, n in freqs.items() if n >= min_freq and tok not in RESERVED_TOKENS),
        key=lambda kv: (-kv[1], kv[0]),
    )
    if max_size is not None:
        kept = kept[: max_size - len(RESERVED_TOKENS)]
    mapping = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
    for offset, (tok, _) in enumerate(kept):
        mapping[tok] = len(RESERVED_TOKENS) + offset
    return Vocabulary(mapping)


def encode(vocab: Vocabulary, text: str, add_bos_eos: bool = False) -> list[int]:
    return vocab.encode(text, add_bos_eos=add_bos_eos)


# ---------------------------------------------------------------------------
# JSON-lines persistence


def _iter_jsonl(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"no such file: {path}")
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {e.msg}") from e
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_corpus(path: str | Path) -> Corpus:
    """Read a JSON-lines documents file: {doc_id, text, title?} per line."""
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            doc = Document(doc_id=obj["doc_id"], text=obj["text"], title=obj.get("title"))
        except KeyError as e:
            raise CorpusError(f"{path}:{lineno}: missing key {e}") from e
        except CorpusError as e:
            raise CorpusError(f"{path}:{lineno}: {e}") from e
        if doc.doc_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        docs.append(doc)
    return Corpus(docs)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in corpus:
            rec = {"doc_id": doc.doc_id, "text": doc.text}
            if doc.title is not None:
                rec["title"] = doc.title
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_queries(path: str | Path, corpus: Corpus | None = None) -> list[QueryRecord]:
    """Read queries; with a corpus given, check relevant_doc_ids resolve."""
    out: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            rec = QueryRecord(
                query_id=obj["query_id"],
                query=obj["query"],
                answer=obj.get("answer"),
                relevant_doc_ids=frozenset(obj.get("relevant_doc_ids", [])),
                q_connector=obj.get("q_connector"),
            )
        except KeyError as e:
            raise CorpusError(f"{path}:{lineno}: missing key {e}") from e
        if rec.query_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate query_id {rec.query_id!r}")
        seen.add(rec.query_id)
        if corpus is not None:
            missing = [d for d in rec.relevant_doc_ids if d not in corpus]
            if missing:
                raise CorpusError(f"{path}:{lineno}: unknown relevant_doc_ids {sorted(missing)}")
        out.append(rec)
    return out


def save_queries(queries: Iterable[QueryRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for q in queries:
            rec: dict = {"query_id": q.query_id, "query": q.query}
            if q.answer is not None:
                rec["answer"] = q.answer
            if q.relevant_doc_ids:
                rec["relevant_doc_ids"] = sorted(q.relevant_doc_ids)
            if q.q_connector is not None:
                rec["q_connector"] = q.q_connector
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_connectors(path: str | Path) -> dict[str, str]:
    """Read a JSON-lines connectors file: {doc_id, d_connector} per line."""
    out: dict[str, str] = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            doc_id, text = obj["doc_id"], obj["d_connector"]
        except KeyError as e:
            raise CorpusError(f"{path}:{lineno}: missing key {e}") from e
        if doc_id in out:
            raise CorpusError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
        out[doc_id] = text
    return out


def save_connectors(connectors: Mapping[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc_id, text in connectors.items():
            f.write(json.dumps({"doc_id": doc_id, "d_connector": text}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Run files

_RUN_HEADER = {"format": "unigen-run", "version": 1}


class Run(NamedTuple):
    rankings: dict[str, list[tuple[str, float]]]
    answers: dict[str, str]


def write_run(
    path: str | Path,
    rankings: Mapping[str, Sequence[tuple[str, float]]],
    answers: Mapping[str, str] | None = None,
) -> None:
    """Write one record per query after validating scores are finite and sorted."""
    answers = dict(answers or {})
    for query_id, ranking in rankings.items():
        scores = [s for _, s in ranking]
        if any(not math.isfinite(s) for s in scores):
            raise CorpusError(f"query {query_id!r}: non-finite score in ranking")
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise CorpusError(f"query {query_id!r}: ranking not sorted by non-increasing score")
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(_RUN_HEADER) + "\n")
        for query_id, ranking in rankings.items():
            rec: dict = {
                "query_id": query_id,
                "ranking": [{"doc_id": d, "score": s} for d, s in ranking],
            }
            if query_id in answers:
                rec["answer"] = answers[query_id]
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_run(path: str | Path) -> Run:
    rankings: dict[str, list[tuple[str, float]]] = {}
    answers: dict[str, str] = {}
    saw_header = False
    for lineno, obj in _iter_jsonl(path):
        if not saw_header:
            if obj.get("format") != _RUN_HEADER["format"]:
                raise CorpusError(f"{path}:{lineno}: missing run-file header")
            if obj.get("version") != _RUN_HEADER["version"]:
                raise CorpusError(f"{path}:{lineno}: unsupported run-file version {obj.get('version')!r}")
            saw_header = True
            continue
        try:
            query_id = obj["query_id"]
            ranking = [(e["doc_id"], float(e["score"])) for e in obj["ranking"]]
        except (KeyError, TypeError) as e:
            raise CorpusError(f"{path}:{lineno}: bad run record") from e
        if query_id in rankings:
            raise CorpusError(f"{path}:{lineno}: duplicate query_id {query_id!r}")
        rankings[query_id] = ranking
        if "answer" in obj:
            answers[query_id] = obj["answer"]
    if not saw_header:
        raise CorpusError(f"{path}: empty file, expected a run-file header")
    return Run(rankings=rankings, answers=answers)

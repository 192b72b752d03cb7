"""Connector text generation: prompt templates and pluggable backends.

A D-Connector is a short generated summary that stands in as a document's
identifier text; a Q-Connector is generated context that enriches a query
before encoding. Both come from a text-generation backend: either an HTTP
chat-completion client or an offline stub whose output is a pure function
of the prompt, so every test and pipeline run can be network-free and
deterministic.

The template strings are load-bearing: golden tests pin them byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import requests

from .corpus import Document, tokenize

log = logging.getLogger(__name__)


class ConnectorError(RuntimeError):
    """Bad prompt bindings, empty inputs, or a backend that could not deliver."""


class BackendError(ConnectorError):
    pass


class TransportError(BackendError):
    """Network failures and retryable statuses that survived every retry."""


class RequestError(BackendError):
    """Non-retryable client-side rejection (4xx other than 429)."""


class ProtocolError(BackendError):
    """Response arrived but does not look like a chat completion."""


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    text: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(re.findall(r"\{(\w+)\}", self.text))


TEMPLATES: dict[str, PromptTemplate] = {
    "d_connector": PromptTemplate(
        kind="d_connector",
        text="Summarize the key information of the following document in about {m} words.\nDocument:{d}",
    ),
    "q_connector": PromptTemplate(
        kind="q_connector",
        text="Write a context to the following question in about {n} words.\nQuestion:{q}",
    ),
    "iter_q_connector": PromptTemplate(
        kind="iter_q_connector",
        text=(
            "Given the following potentially relevant documents and the potentially correct answer, "
            "please provide the context for the question in {n} words. \nDocument:{d} \nAnswer:{a} \nQuestion:{q}"
        ),
    ),
    # Plumbing template for pretraining data, not one of the quoted three.
    # The response contract ("Question:" line then "Answer:" line) is parsed
    # by the pipeline and honoured by the stub.
    "pseudo_pair": PromptTemplate(
        kind="pseudo_pair",
        text=(
            "Ask one natural question that the following document answers, then give the answer "
            "using only words from the document. Respond with exactly two lines, the first starting "
            "with 'Question:' and the second starting with 'Answer:'. "
            "Variant:{k} Seed:{s}\nDocument:{d}"
        ),
    ),
}


def render_prompt(template: PromptTemplate, bindings) -> str:
    """Substitute placeholder values into the template text.

    Every placeholder appearing in the template must be bound; the check runs
    over the template, not the rendered text, so braces inside substituted
    content are never mistaken for unresolved placeholders.
    """
    missing = [name for name in template.placeholders if name not in bindings]
    if missing:
        raise ConnectorError(f"{template.kind}: missing binding(s) {sorted(missing)}")
    return re.sub(r"\{(\w+)\}", lambda m: str(bindings[m.group(1)]), template.text)


class GenBackend(Protocol):
    model: str

    def generate(self, prompt: str) -> str: ...


_STOPWORDS = frozenset(
    "a an the of in on at to for is are was were be and or that this it its as by with from "
    "what which who whom whose how when where why does do did can could will would".split()
)

_SENT_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def _first_sentence(text: str) -> str:
    parts = _SENT_SPLIT_RE.split(text.strip(), maxsplit=1)
    return parts[0].strip()


def _content_terms(text: str) -> list[str]:
    return [t for t in dict.fromkeys(tokenize(text)) if t not in _STOPWORDS]


def _trim_words(text: str, budget: int) -> str:
    words = text.split()
    return " ".join(words[: max(1, budget)])


class StubBackend:
    """Offline backend: recognizes the known prompt shapes and answers by rule.

    Pure function of the prompt text; the pseudo-pair rule draws its choices
    from a hash of the prompt, so the Variant/Seed fields embedded there are
    what vary the output.
    """

    model = "stub"

    def generate(self, prompt: str) -> str:
        if prompt.startswith("Summarize the key information of the following document in about "):
            return self._summarize(prompt)
        if prompt.startswith("Write a context to the following question in about "):
            return self._query_context(prompt)
        if prompt.startswith("Given the following potentially relevant documents"):
            return self._iter_context(prompt)
        if prompt.startswith("Ask one natural question that the following document answers"):
            return self._pseudo_pair(prompt)
        raise ConnectorError("stub backend got a prompt it has no rule for")

    def _summarize(self, prompt: str) -> str:
        m = int(re.search(r"in about (\d+) words", prompt).group(1))
        doc = prompt.split("Document:", 1)[1]
        words = tokenize(doc)
        if not words:
            raise ConnectorError("document has no usable words to summarize")
        return " ".join(words[:m])

    def _query_context(self, prompt: str) -> str:
        n = int(re.search(r"in about (\d+) words", prompt).group(1))
        query = prompt.split("Question:", 1)[1].strip()
        terms = _content_terms(query)
        if not terms:
            return query
        return _trim_words(f"{query} . this question concerns {' '.join(terms)}", n)

    def _iter_context(self, prompt: str) -> str:
        # Same shape as _query_context so refined inputs look like the ones
        # the model trained on, with the term list enriched from the evidence
        # (answer terms first) and the whole context held to the n-word budget.
        n = int(re.search(r"in (\d+) words", prompt).group(1))
        docs_blob = prompt.split("Document:", 1)[1].split(" \nAnswer:", 1)[0]
        answer = prompt.split(" \nAnswer:", 1)[1].split(" \nQuestion:", 1)[0].strip()
        query = prompt.split(" \nQuestion:", 1)[1].strip()
        sentences = [_first_sentence(line) for line in docs_blob.split("\n") if line.strip()]
        terms = _content_terms(" ".join([query, answer, *sentences]))
        if not terms:
            return query
        return _trim_words(f"{query} . this question concerns {' '.join(terms)}", n)

    def _pseudo_pair(self, prompt: str) -> str:
        doc = prompt.split("Document:", 1)[1].strip()
        sentences = [s for s in _SENT_SPLIT_RE.split(doc) if tokenize(s)]
        if not sentences:
            raise ConnectorError("document has no usable sentences for a pseudo pair")
        rng = random.Random(int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "big"))
        sent = sentences[rng.randrange(len(sentences))]
        words = [t for t in tokenize(sent) if t not in _STOPWORDS] or tokenize(sent)
        span = min(rng.randint(3, 8), len(words))
        start = rng.randrange(len(words) - span + 1)
        question = " ".join(words[start : start + span])
        answer = " ".join(tokenize(sent)[:24])
        return f"Question: {question}\nAnswer: {answer}"


class _RateLimiter:
    """Spaces request starts at least min_interval seconds apart, across threads."""

    def __init__(self, min_interval: float, clock=time.monotonic, sleep=time.sleep):
        self.min_interval = min_interval
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next_ok = 0.0

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self._clock()
            delay = self._next_ok - now
            self._next_ok = max(now, self._next_ok) + self.min_interval
        if delay > 0:
            self._sleep(delay)


class HttpBackend:
    """Chat-completion client: single user message in, first choice text out.

    Retries transport failures, 429 and 5xx with exponential backoff (base 1s,
    doubling, plus up to 25% jitter); other 4xx fail immediately. The session,
    sleep function and jitter rng are injectable so tests never touch the
    network or the wall clock.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str | None = None,
        temperature: float = 0.0,
        max_tokens: int = 256,
        timeout_s: float = 30.0,
        max_attempts: int = 4,
        backoff_base_s: float = 1.0,
        backoff_factor: float = 2.0,
        max_in_flight: int = 4,
        min_interval_s: float = 0.0,
        session=None,
        sleep=time.sleep,
        rng: random.Random | None = None,
    ):
        if not base_url:
            raise ConnectorError("HTTP backend needs a base_url")
        if max_attempts < 1:
            raise ConnectorError("max_attempts must be >= 1")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.backoff_factor = backoff_factor
        self.session = session if session is not None else requests.Session()
        self.sleep = sleep
        self.rng = rng if rng is not None else random.Random()
        self._gate = threading.Semaphore(max_in_flight)
        self._limiter = _RateLimiter(min_interval_s, sleep=sleep)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise ConnectorError(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def generate(self, prompt: str) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        headers = self._headers()
        last: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            if attempt > 1:
                delay = self.backoff_base_s * self.backoff_factor ** (attempt - 2)
                self.sleep(delay * (1.0 + 0.25 * self.rng.random()))
            try:
                with self._gate:
                    self._limiter.wait()
                    resp = self.session.post(self.url, json=body, headers=headers, timeout=self.timeout_s)
            except requests.RequestException as e:
                last = e
                log.warning("request attempt %d/%d failed: %s", attempt, self.max_attempts, e)
                continue
            if 200 <= resp.status_code < 300:
                return self._extract(resp)
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code}")
                log.warning("attempt %d/%d got HTTP %d", attempt, self.max_attempts, resp.status_code)
                continue
            raise RequestError(f"HTTP {resp.status_code} from {self.url}")
        raise TransportError(f"gave up after {self.max_attempts} attempts: {last}") from last

    def _extract(self, resp) -> str:
        try:
            data = resp.json()
        except ValueError as e:
            raise ProtocolError("response body is not JSON") from e
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError("response JSON lacks choices[0].message.content") from e
        if not isinstance(content, str):
            raise ProtocolError("message content is not text")
        return content


def http_generate(backend: HttpBackend, prompt: str) -> str:
    return backend.generate(prompt)


class ResponseCache:
    """One JSON file per (model, prompt) pair; writes are temp-then-rename."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _key(self, model: str, prompt: str) -> str:
        return hashlib.sha256(f"{model}\n{prompt}".encode("utf-8")).hexdigest()

    def get(self, model: str, prompt: str) -> str | None:
        path = self.dir / f"{self._key(model, prompt)}.json"
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        except (json.JSONDecodeError, KeyError):
            log.warning("discarding unreadable cache entry %s", path)
            return None

    def put(self, model: str, prompt: str, response: str) -> None:
        key = self._key(model, prompt)
        entry = {"prompt_sha": key, "model": model, "response": response, "timestamp": time.time()}
        tmp = self.dir / f".{key}.tmp-{os.getpid()}-{threading.get_ident()}"
        tmp.write_text(json.dumps(entry), encoding="utf-8")
        os.replace(tmp, self.dir / f"{key}.json")


class CachedBackend:
    """Wraps any backend with a ResponseCache; hits skip the inner call."""

    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        self.model = inner.model

    def generate(self, prompt: str) -> str:
        hit = self.cache.get(self.model, prompt)
        if hit is not None:
            return hit
        out = self.inner.generate(prompt)
        self.cache.put(self.model, prompt, out)
        return out


def _one_paragraph(text: str) -> str:
    return text.strip().split("\n\n", 1)[0].strip()


def gen_d_connector(doc: Document, m: int, backend) -> str:
    """Generated summary used as the document's identifier text."""
    if not doc.text.strip():
        raise ConnectorError(f"{doc.doc_id}: document text is empty")
    content = f"{doc.title}. {doc.text}" if doc.title else doc.text
    prompt = render_prompt(TEMPLATES["d_connector"], {"m": m, "d": content})
    try:
        out = _one_paragraph(backend.generate(prompt))
    except BackendError as e:
        raise BackendError(f"d-connector for {doc.doc_id!r}: {e}") from e
    if not out:
        raise ConnectorError(f"d-connector for {doc.doc_id!r} came back empty")
    return out


def gen_q_connector(query: str, n: int, backend) -> str:
    """Generated context that travels with the query into the encoder."""
    if not query.strip():
        raise ConnectorError("empty query")
    prompt = render_prompt(TEMPLATES["q_connector"], {"n": n, "q": query})
    try:
        out = _one_paragraph(backend.generate(prompt))
    except BackendError as e:
        raise BackendError(f"q-connector for {query!r}: {e}") from e
    if not out:
        raise ConnectorError(f"q-connector for {query!r} came back empty")
    return out


def gen_iter_q_connector(
    query: str,
    topk_docs: list[Document],
    prev_answer: str,
    n: int,
    k_docs: int = 3,
    max_doc_words: int = 60,
    backend=None,
) -> str:
    """Query context regenerated from the previous round's evidence.

    The prompt sees the top k_docs documents, each cut to max_doc_words words
    and placed on its own line, plus the previous answer and the query.
    """
    if k_docs < 1:
        raise ConnectorError("k_docs must be >= 1")
    if not topk_docs:
        raise ConnectorError("no documents to condition on")
    if not query.strip():
        raise ConnectorError("empty query")
    lines = []
    for doc in topk_docs[:k_docs]:
        content = f"{doc.title}. {doc.text}" if doc.title else doc.text
        lines.append(" ".join(content.split()[:max_doc_words]))
    prompt = render_prompt(
        TEMPLATES["iter_q_connector"],
        {"n": n, "d": "\n".join(lines), "a": prev_answer, "q": query},
    )
    try:
        out = _one_paragraph(backend.generate(prompt))
    except BackendError as e:
        raise BackendError(f"iteration q-connector for {query!r}: {e}") from e
    if not out:
        raise ConnectorError(f"iteration q-connector for {query!r} came back empty")
    return out

"""End-to-end orchestration: assets, pseudo data, two-stage training, inference.

The flow mirrors the training recipe: synthesize K pseudo query/answer pairs
per document, pretrain on <pseudo_query+document -> docid> and <... -> answer>,
then finetune on labeled <enhanced query -> docid> and <... -> answer>.
Inference runs trie-constrained beam search plus greedy answer decoding; the
iterative variant regenerates the query context from the previous round's
top documents and answer, with no parameter updates.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from . import metrics
from .connectors import (
    TEMPLATES,
    ConnectorError,
    gen_d_connector,
    gen_iter_q_connector,
    gen_q_connector,
    render_prompt,
)
from .corpus import EOS_ID, Corpus, QueryRecord, Run, Vocabulary, build_vocab, tokenize
from .decoding import RetrievalResult, constrained_beam_search, greedy_decode
from .docid_trie import DocidSequence, DocidTrie, build_trie, disambiguate, sequences_from_connectors
from .metrics import MetricConfig
from .model import (
    QA_HEAD,
    ModelConfig,
    TrainConfig,
    Trainer,
    UniGenModel,
    encode_input,
    init_model,
)

log = logging.getLogger(__name__)

# Joins a query (or pseudo query) to its context in one input string.
SEPARATOR = "context:"


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PseudoPair:
    doc_id: str
    pseudo_query: str
    pseudo_answer: str
    input_text: str

    def __post_init__(self):
        if not self.pseudo_answer.strip():
            raise PipelineError(f"pseudo pair for {self.doc_id!r} has an empty answer")


class TrainItem(NamedTuple):
    """Positionally compatible with the model's (input, docid, answer) batches."""

    input_tokens: tuple[int, ...]
    docid_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]
    stage: str


@dataclass(frozen=True)
class IterState:
    round: int
    q_connector: str | None
    ranking: RetrievalResult
    answer: str


@dataclass(frozen=True)
class IterRun:
    states: tuple[IterState, ...]
    partial: bool = False
    error: str | None = None


@dataclass
class RetrievalAssets:
    """Everything inference and training share: texts, ids, identifier paths."""

    corpus: Corpus
    vocab: Vocabulary
    connectors: dict[str, str]
    sequences: list[DocidSequence]
    trie: DocidTrie
    seq_tokens: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.seq_tokens:
            self.seq_tokens = {s.doc_id: s.tokens for s in self.sequences}

    def docid_tokens(self, doc_id: str) -> tuple[int, ...]:
        try:
            return self.seq_tokens[doc_id]
        except KeyError:
            raise PipelineError(f"no identifier sequence for doc_id {doc_id!r}") from None


def _fallback_identifier(doc, m: int) -> str:
    """Identifier used when D-Connectors are disabled: title plus leading words."""
    content = f"{doc.title} {doc.text}" if doc.title else doc.text
    words = tokenize(content)
    if not words:
        raise PipelineError(f"{doc.doc_id!r}: no words to build an identifier from")
    return " ".join(words[:m])


def build_assets(
    corpus: Corpus,
    queries: Sequence[QueryRecord] = (),
    backend=None,
    m: int = 32,
    use_d_connector: bool = True,
    vocab: Vocabulary | None = None,
    min_freq: int = 1,
    max_size: int | None = None,
) -> RetrievalAssets:
    """Connector texts (generated or reused), vocabulary, identifier trie.

    Existing corpus.d_connectors are reused as-is; otherwise every document
    gets one from the backend. Passing an explicit vocab skips vocabulary
    construction (the caller then owns coverage).
    """
    if len(corpus) == 0:
        raise PipelineError("empty corpus")
    if use_d_connector:
        if corpus.d_connectors and len(corpus.d_connectors) == len(corpus):
            raw = dict(corpus.d_connectors)
        else:
            if backend is None:
                raise PipelineError("no stored d-connectors and no backend to generate them")
            raw = {doc.doc_id: gen_d_connector(doc, m, backend) for doc in corpus}
    else:
        raw = {doc.doc_id: _fallback_identifier(doc, m) for doc in corpus}
    connectors = disambiguate(raw)
    if vocab is None:
        texts = [SEPARATOR]
        for doc in corpus:
            texts.append(doc.text)
            if doc.title:
                texts.append(doc.title)
        texts.extend(connectors.values())
        for q in queries:
            texts.append(q.query)
            if q.answer:
                texts.append(q.answer)
            if q.q_connector:
                texts.append(q.q_connector)
        vocab = build_vocab(texts, min_freq=min_freq, max_size=max_size)
    sequences = sequences_from_connectors(connectors, vocab)
    trie = build_trie(sequences)
    return RetrievalAssets(corpus=corpus, vocab=vocab, connectors=connectors, sequences=sequences, trie=trie)


def _parse_pseudo_response(text: str) -> tuple[str, str]:
    question = answer = None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("Question:") and question is None:
            question = line[len("Question:") :].strip()
        elif line.startswith("Answer:") and answer is None:
            answer = line[len("Answer:") :].strip()
    if not question or not answer:
        raise ConnectorError(f"pseudo-pair response lacks Question:/Answer: lines: {text[:80]!r}")
    return question, answer


def gen_pseudo_data(
    corpus: Corpus,
    k_per_doc: int,
    backend,
    seed: int = 0,
    max_input_len: int = 64,
) -> list[PseudoPair]:
    """Exactly k_per_doc (pseudo query, pseudo answer) pairs per document.

    input_text is the pseudo query, the separator word, then the document
    truncated so the whole thing fits in max_input_len tokens.
    """
    if k_per_doc < 1:
        raise PipelineError("k_per_doc must be >= 1")
    pairs = []
    for doc in corpus:
        doc_words = tokenize(doc.text)
        for k in range(1, k_per_doc + 1):
            prompt = render_prompt(TEMPLATES["pseudo_pair"], {"k": k, "s": seed, "d": doc.text})
            try:
                question, answer = _parse_pseudo_response(backend.generate(prompt))
            except ConnectorError as e:
                raise ConnectorError(f"pseudo pair {k} for {doc.doc_id!r}: {e}") from e
            budget = max(1, max_input_len - len(tokenize(question)) - 1)
            input_text = f"{question} {SEPARATOR} {' '.join(doc_words[:budget])}"
            pairs.append(
                PseudoPair(doc_id=doc.doc_id, pseudo_query=question, pseudo_answer=answer, input_text=input_text)
            )
    return pairs


def save_pseudo_pairs(pairs: Sequence[PseudoPair], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(
                json.dumps(
                    {
                        "doc_id": p.doc_id,
                        "pseudo_query": p.pseudo_query,
                        "pseudo_answer": p.pseudo_answer,
                        "input_text": p.input_text,
                    }
                )
                + "\n"
            )


def load_pseudo_pairs(path) -> list[PseudoPair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                pairs.append(
                    PseudoPair(
                        doc_id=obj["doc_id"],
                        pseudo_query=obj["pseudo_query"],
                        pseudo_answer=obj["pseudo_answer"],
                        input_text=obj["input_text"],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise PipelineError(f"{path}:{lineno}: bad pseudo-pair record") from e
    return pairs


def query_input_text(query: str, q_connector: str | None, use_q_connector: bool = True) -> str:
    if not use_q_connector or not q_connector:
        return query
    return f"{query} {SEPARATOR} {q_connector}"


def _encode_answer(vocab: Vocabulary, text: str, max_output_len: int) -> tuple[int, ...]:
    ids = vocab.encode(text)[: max_output_len - 1]
    return (*ids, EOS_ID)


def _encode_input(vocab: Vocabulary, text: str, max_input_len: int) -> tuple[int, ...]:
    ids = vocab.encode(text)
    return tuple(ids[:max_input_len]) if ids else (EOS_ID,)


def pretrain_items(pairs: Sequence[PseudoPair], assets: RetrievalAssets, config: ModelConfig) -> list[TrainItem]:
    return [
        TrainItem(
            input_tokens=_encode_input(assets.vocab, p.input_text, config.max_input_len),
            docid_tokens=assets.docid_tokens(p.doc_id),
            answer_tokens=_encode_answer(assets.vocab, p.pseudo_answer, config.max_output_len),
            stage="pretrain",
        )
        for p in pairs
    ]


def finetune_items(
    queries: Sequence[QueryRecord],
    assets: RetrievalAssets,
    config: ModelConfig,
    use_q_connector: bool = True,
) -> tuple[list[TrainItem], list[tuple[str, str]]]:
    """Labeled items plus a (query_id, reason) report for queries left out."""
    items: list[TrainItem] = []
    skipped: list[tuple[str, str]] = []
    for q in queries:
        if use_q_connector and not q.q_connector:
            skipped.append((q.query_id, "missing q_connector"))
            continue
        if not q.answer or not q.answer.strip():
            skipped.append((q.query_id, "missing answer"))
            continue
        golds = [d for d in sorted(q.relevant_doc_ids) if d in assets.seq_tokens]
        if not golds:
            skipped.append((q.query_id, "no relevant doc with an identifier"))
            continue
        input_tokens = _encode_input(
            assets.vocab, query_input_text(q.query, q.q_connector, use_q_connector), config.max_input_len
        )
        answer_tokens = _encode_answer(assets.vocab, q.answer, config.max_output_len)
        for doc_id in golds:
            items.append(
                TrainItem(
                    input_tokens=input_tokens,
                    docid_tokens=assets.docid_tokens(doc_id),
                    answer_tokens=answer_tokens,
                    stage="finetune",
                )
            )
    return items, skipped


def _write_loss_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss_retr", "loss_qa", "loss_joint"])
        for step, lr, lq, lj in rows:
            writer.writerow([step, f"{lr:.6f}", f"{lq:.6f}", f"{lj:.6f}"])


def _run_training(
    model: UniGenModel,
    items: Sequence[TrainItem],
    config: TrainConfig,
    stage: str,
    seed: int = 0,
    log_path=None,
    epoch_hook=None,
) -> list[tuple[int, float, float, float]]:
    if not items:
        raise PipelineError(f"no {stage} items to train on")
    bad = {it.stage for it in items} - {stage}
    if bad:
        raise PipelineError(f"{stage} got items from stage(s) {sorted(bad)}")
    trainer = Trainer(model, config)
    rng = random.Random(seed)
    rows = []
    for epoch in range(config.epochs):
        order = list(items)
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            lr, lq, lj = trainer.step(batch)
            rows.append((trainer.steps_done, lr, lq, lj))
        if epoch_hook is not None:
            epoch_hook(epoch, model)
    if log_path is not None:
        _write_loss_log(log_path, rows)
    return rows


def pretrain(
    model: UniGenModel,
    assets: RetrievalAssets,
    pseudo_pairs: Sequence[PseudoPair],
    config: TrainConfig,
    seed: int = 0,
    log_path=None,
    epoch_hook=None,
):
    """First stage: train on pseudo pairs only. Returns (model, loss rows)."""
    if not pseudo_pairs:
        raise PipelineError("no pseudo pairs to pretrain on")
    items = pretrain_items(pseudo_pairs, assets, model.config)
    rows = _run_training(model, items, config, "pretrain", seed=seed, log_path=log_path, epoch_hook=epoch_hook)
    return model, rows


def finetune(
    model: UniGenModel,
    assets: RetrievalAssets,
    queries: Sequence[QueryRecord],
    config: TrainConfig,
    seed: int = 0,
    log_path=None,
    use_q_connector: bool = True,
    epoch_hook=None,
):
    """Second stage: labeled queries only. Returns (model, loss rows, skip report)."""
    items, skipped = finetune_items(queries, assets, model.config, use_q_connector)
    for query_id, reason in skipped:
        log.warning("finetune skipping %s: %s", query_id, reason)
    rows = _run_training(model, items, config, "finetune", seed=seed, log_path=log_path, epoch_hook=epoch_hook)
    return model, rows, skipped


def run_base(
    model: UniGenModel,
    assets: RetrievalAssets,
    query: QueryRecord,
    backend=None,
    beam_size: int = 10,
    n: int = 64,
    use_q_connector: bool = True,
    answer_max_len: int = 32,
) -> IterState:
    """Single-pass inference: rank identifiers, decode an answer (round 0)."""
    q_connector = query.q_connector
    if use_q_connector and not q_connector:
        if backend is None:
            raise PipelineError(f"{query.query_id}: no q_connector and no backend to generate one")
        q_connector = gen_q_connector(query.query, n, backend)
    input_tokens = _encode_input(
        assets.vocab, query_input_text(query.query, q_connector, use_q_connector), model.config.max_input_len
    )
    state = encode_input(model, input_tokens)
    ranking = constrained_beam_search(model, state, assets.trie, beam_size=beam_size)
    answer = assets.vocab.decode(greedy_decode(model, QA_HEAD, state, max_len=answer_max_len))
    return IterState(round=0, q_connector=q_connector if use_q_connector else None, ranking=ranking, answer=answer)


def run_iter(
    model: UniGenModel,
    assets: RetrievalAssets,
    query: QueryRecord,
    backend,
    iterations: int = 2,
    beam_size: int = 10,
    n: int = 64,
    k_docs: int = 3,
    max_doc_words: int = 60,
    use_q_connector: bool = True,
    answer_max_len: int = 32,
) -> IterRun:
    """Round 0 plus `iterations` refinement rounds; inference only.

    Each refinement regenerates the query context from the previous round's
    top documents and answer, then re-runs both decoders. A backend failure
    at round r returns rounds 0..r-1 marked partial instead of raising.
    """
    if iterations < 0:
        raise PipelineError("iterations must be >= 0")
    states = [run_base(model, assets, query, backend, beam_size, n, use_q_connector, answer_max_len)]
    for r in range(1, iterations + 1):
        prev = states[-1]
        top = [assets.corpus.get(d) for d in prev.ranking.doc_ids()[:k_docs]]
        if not top:
            return IterRun(states=tuple(states), partial=True, error=f"round {r}: empty previous ranking")
        try:
            q_connector = gen_iter_q_connector(
                query.query, top, prev.answer, n, k_docs=k_docs, max_doc_words=max_doc_words, backend=backend
            )
        except ConnectorError as e:
            log.warning("iteration round %d for %s failed: %s", r, query.query_id, e)
            return IterRun(states=tuple(states), partial=True, error=str(e))
        input_tokens = _encode_input(
            assets.vocab, query_input_text(query.query, q_connector, True), model.config.max_input_len
        )
        state = encode_input(model, input_tokens)
        ranking = constrained_beam_search(model, state, assets.trie, beam_size=beam_size)
        answer = assets.vocab.decode(greedy_decode(model, QA_HEAD, state, max_len=answer_max_len))
        states.append(IterState(round=r, q_connector=q_connector, ranking=ranking, answer=answer))
    return IterRun(states=tuple(states), partial=False, error=None)


def states_to_run(per_query: dict[str, IterState]) -> Run:
    rankings = {qid: list(st.ranking.ranking) for qid, st in per_query.items()}
    answers = {qid: st.answer for qid, st in per_query.items()}
    return Run(rankings=rankings, answers=answers)


def evaluate_run(
    run: Run,
    queries: Sequence[QueryRecord],
    metric_config: MetricConfig = MetricConfig(),
    run_id: str = "",
    config_hash: str = "",
) -> dict:
    """Per-query and aggregate metrics as a JSON-ready report."""
    if not run.rankings:
        raise PipelineError("empty run: nothing to evaluate")
    by_id = {q.query_id: q for q in queries}
    per_query = []
    for query_id in sorted(run.rankings):
        if query_id not in by_id:
            raise PipelineError(f"run contains unknown query_id {query_id!r}")
        q = by_id[query_id]
        if not q.relevant_doc_ids:
            raise PipelineError(f"query {query_id!r} has no relevant_doc_ids to score against")
        ranked_ids = [doc_id for doc_id, _ in run.rankings[query_id]]
        gold_ranks = [i + 1 for i, d in enumerate(ranked_ids) if d in q.relevant_doc_ids]
        answer = run.answers.get(query_id, "")
        golds = [q.answer or ""]
        per_query.append(
            {
                "query_id": query_id,
                "rank_of_gold": gold_ranks[0] if gold_ranks else None,
                "rr": metrics.reciprocal_rank_at_k(ranked_ids, q.relevant_doc_ids, metric_config.max_k),
                "recall_hits": {
                    str(k): metrics.recall_at_k(ranked_ids, q.relevant_doc_ids, k)
                    for k in metric_config.k_values
                },
                "bleu1": metrics.bleu1(answer, golds),
                "rouge_l": metrics.rouge_l(answer, golds[0], beta=metric_config.rouge_beta),
                "em": metrics.exact_match(answer, golds),
                "f1": metrics.token_f1(answer, golds),
            }
        )
    count = len(per_query)
    aggregate = {f"mrr@{metric_config.max_k}": sum(row["rr"] for row in per_query) / count}
    for k in metric_config.k_values:
        aggregate[f"r@{k}"] = sum(row["recall_hits"][str(k)] for row in per_query) / count
    for key in ("bleu1", "rouge_l", "em", "f1"):
        aggregate[key] = sum(row[key] for row in per_query) / count
    return {"run_id": run_id, "config_hash": config_hash, "per_query": per_query, "aggregate": aggregate}


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_eval_report(report: dict, path) -> None:
    Path(path).write_text(report_to_json(report), encoding="utf-8")


def _curve_rows(runs: dict[str, IterRun], queries, metric_config) -> list[tuple[int, float, float]]:
    """(round, mean reciprocal rank, mean exact match) for rounds every query reached."""
    if not runs:
        raise PipelineError("no iteration runs to summarize")
    rounds = max(len(r.states) for r in runs.values())
    rows = []
    for rnd in range(rounds):
        at_round = {qid: r.states[rnd] for qid, r in runs.items() if len(r.states) > rnd}
        if not at_round:
            break
        report = evaluate_run(states_to_run(at_round), queries, metric_config)
        rows.append((rnd, report["aggregate"][f"mrr@{metric_config.max_k}"], report["aggregate"]["em"]))
    return rows


def write_iteration_curve(runs: dict[str, IterRun], queries, path, metric_config: MetricConfig = MetricConfig()):
    rows = _curve_rows(runs, queries, metric_config)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "mrr10", "qa_metric"])
        for rnd, mrr, qa in rows:
            writer.writerow([rnd, f"{mrr:.6f}", f"{qa:.6f}"])
    return rows


def write_learning_curve(rows: Iterable[tuple[int, float, float]], path) -> None:
    """rows: (epoch, mrr@10, qa metric) collected by an epoch hook during training."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mrr10", "qa_metric"])
        for epoch, mrr, qa in rows:
            writer.writerow([epoch, f"{mrr:.6f}", f"{qa:.6f}"])


@dataclass(frozen=True)
class ExperimentResult:
    report: dict
    model: UniGenModel
    assets: RetrievalAssets
    runs: dict[str, IterRun]


def attach_q_connectors(queries: Sequence[QueryRecord], backend, n: int = 64) -> list[QueryRecord]:
    """Fill in missing q_connector fields via the backend; present ones are kept."""
    out = []
    for q in queries:
        if q.q_connector:
            out.append(q)
        else:
            out.append(replace(q, q_connector=gen_q_connector(q.query, n, backend)))
    return out


def run_experiment(
    corpus: Corpus,
    train_queries: Sequence[QueryRecord],
    eval_queries: Sequence[QueryRecord],
    backend,
    share_encoder: bool = True,
    use_q_connector: bool = True,
    use_d_connector: bool = True,
    seed: int = 0,
    k_pseudo: int = 5,
    iterations: int = 0,
    beam_size: int = 10,
    m: int = 32,
    n: int = 64,
    pretrain_config: TrainConfig | None = None,
    finetune_config: TrainConfig | None = None,
    model_fields: dict | None = None,
    metric_config: MetricConfig = MetricConfig(),
    run_id: str = "",
    config_hash: str = "",
) -> ExperimentResult:
    """Whole recipe in one call: assets, pseudo data, two-stage training, eval.

    The three ablation switches reproduce the reduced variants: a separate
    answer-route encoder, raw queries instead of generated contexts, and
    title-plus-leading-words identifiers instead of generated summaries.
    """
    if use_q_connector:
        train_queries = attach_q_connectors(train_queries, backend, n)
        eval_queries = attach_q_connectors(eval_queries, backend, n)
    assets = build_assets(
        corpus, queries=[*train_queries, *eval_queries], backend=backend, m=m, use_d_connector=use_d_connector
    )
    pseudo = gen_pseudo_data(corpus, k_pseudo, backend, seed=seed)
    fields = dict(model_fields or {})
    fields.setdefault("vocab_size", len(assets.vocab))
    fields.setdefault("share_encoder", share_encoder)
    fields.setdefault("seed", seed)
    model = init_model(ModelConfig(**fields))
    pre_cfg = pretrain_config if pretrain_config is not None else TrainConfig()
    fine_cfg = finetune_config if finetune_config is not None else TrainConfig()
    pretrain(model, assets, pseudo, pre_cfg, seed=seed)
    finetune(model, assets, train_queries, fine_cfg, seed=seed + 1, use_q_connector=use_q_connector)
    runs = {}
    for q in eval_queries:
        runs[q.query_id] = run_iter(
            model,
            assets,
            q,
            backend,
            iterations=iterations,
            beam_size=beam_size,
            n=n,
            use_q_connector=use_q_connector,
        )
    final = {qid: r.states[-1] for qid, r in runs.items()}
    report = evaluate_run(
        states_to_run(final), eval_queries, metric_config, run_id=run_id, config_hash=config_hash
    )
    return ExperimentResult(report=report, model=model, assets=assets, runs=runs)


ABLATION_CONFIGS = (
    ("full", {}),
    ("w/o shared encoder", {"share_encoder": False}),
    ("w/o Q-Connector", {"use_q_connector": False}),
    ("w/o D-Connector", {"use_d_connector": False}),
)


def run_ablation(
    corpus: Corpus,
    train_queries: Sequence[QueryRecord],
    eval_queries: Sequence[QueryRecord],
    backend,
    seed: int = 0,
    **experiment_kwargs,
) -> list[dict]:
    """One row per configuration; no ordering between rows is implied."""
    rows = []
    for name, switches in ABLATION_CONFIGS:
        result = run_experiment(
            corpus, train_queries, eval_queries, backend, seed=seed, **switches, **experiment_kwargs
        )
        agg = result.report["aggregate"]
        rows.append(
            {
                "name": name,
                "mrr@10": agg.get("mrr@10", 0.0),
                "r@1": agg.get("r@1", 0.0),
                "em": agg["em"],
                "f1": agg["f1"],
            }
        )
    return rows


def write_ablation_report(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "mrr@10", "r@1", "em", "f1"])
        for row in rows:
            writer.writerow(
                [row["name"], f"{row['mrr@10']:.6f}", f"{row['r@1']:.6f}", f"{row['em']:.6f}", f"{row['f1']:.6f}"]
            )

"""Command line: the pipeline as subcommands over a hashed artifact directory.

Every command resolves the same effective config (defaults, then --config
file, then dotted overrides like --train.lambda 0.6), hashes it, and works
inside <paths.out>/<hash>. Running the stages in order against one config
therefore chains automatically: each stage finds the previous stage's files.
Logs go to stderr; stdout carries only machine-readable results.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import (
    ConfigError,
    apply_override,
    config_hash,
    load_config,
    make_backend,
    make_metric_config,
    make_model_config,
    make_train_config,
    parse_override_value,
)
from .connectors import gen_d_connector
from .corpus import (
    Vocabulary,
    load_connectors,
    load_corpus,
    load_queries,
    read_run,
    save_connectors,
    save_queries,
    write_run,
)
from .decoding import greedy_decode
from .docid_trie import build_trie, load_sequences, save_sequences
from .model import (
    QA_HEAD,
    IntegrityError,
    encode_input,
    init_model,
    load_model,
    save_model,
    vocab_fingerprint,
)
from .pipeline import (
    PipelineError,
    RetrievalAssets,
    attach_q_connectors,
    evaluate_run,
    finetune,
    gen_pseudo_data,
    load_pseudo_pairs,
    pretrain,
    run_base,
    run_iter,
    save_pseudo_pairs,
    states_to_run,
    write_eval_report,
    write_learning_curve,
    _encode_input,
    query_input_text,
)

log = logging.getLogger(__name__)

F_D_CONNECTORS = "d_connectors.jsonl"
F_QUERIES_QC = "queries_with_connectors.jsonl"
F_PSEUDO = "pseudo.jsonl"
F_VOCAB = "vocab.jsonl"
F_SEQUENCES = "docid_seqs.jsonl"
F_IDENTIFIERS = "identifiers.jsonl"
F_MODEL = "model.ckpt"
F_MODEL_FT = "model_ft.ckpt"
F_RUN = "run.jsonl"
F_ANSWER_RUN = "answer_run.jsonl"
F_REPORT = "eval_report.json"
F_ITER_CURVE = "iteration_curve.csv"
F_LEARN_CURVE = "learning_curve.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's SystemExit(2)
        raise UsageError(message)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags like --train.lambda X override it")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="overrides paths.out (artifact root parent)")

    parser = _Parser(prog="unigen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-connectors", parents=[common], help="generate D- and/or Q-Connector texts")
    p.add_argument("--kind", choices=["d", "q", "both"], default="both")
    p.add_argument("--queries", help="queries file (needed for Q-Connectors)")

    sub.add_parser("gen-pseudo", parents=[common], help="synthesize pseudo query/answer pairs")

    p = sub.add_parser("build-trie", parents=[common], help="vocabulary + identifier sequences + trie inputs")
    p.add_argument("--queries", help="queries whose words should enter the vocabulary")

    sub.add_parser("pretrain", parents=[common], help="stage 1: train on pseudo pairs")

    p = sub.add_parser("finetune", parents=[common], help="stage 2: train on labeled queries")
    p.add_argument("--queries", help="labeled queries with q_connector fields")

    p = sub.add_parser("retrieve", parents=[common], help="rank identifiers (and decode answers) per query")
    p.add_argument("--queries")

    p = sub.add_parser("answer", parents=[common], help="decode answers only")
    p.add_argument("--queries")

    p = sub.add_parser("run-iter", parents=[common], help="iterative refinement inference")
    p.add_argument("--queries")

    p = sub.add_parser("evaluate", parents=[common], help="score a run file against gold queries")
    p.add_argument("--run", help="run file (default: <root>/run.jsonl)")
    p.add_argument("--queries")

    p = sub.add_parser("curves", parents=[common], help="emit iteration or learning curve CSVs")
    p.add_argument("--kind", choices=["iteration", "learning"], required=True)
    p.add_argument("--queries")

    return parser


def _parse_dotted(tokens: list[str]) -> list[tuple[str, object]]:
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unrecognized argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, raw = body.split("=", 1)
            i += 1
        else:
            key = body
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for {tok}")
            raw = tokens[i + 1]
            i += 2
        if "." not in key:
            raise UsageError(f"unrecognized argument {tok!r}")
        pairs.append((key, parse_override_value(raw)))
    return pairs


def _setup(ns, extra) -> tuple[dict, Path]:
    cfg = load_config(ns.config)
    for key, value in _parse_dotted(extra):
        apply_override(cfg, key, value)
    if ns.seed is not None:
        cfg["seed"] = ns.seed
    if ns.out:
        cfg["paths"]["out"] = ns.out
    digest = config_hash(cfg)
    root = Path(cfg["paths"]["out"]) / digest
    root.mkdir(parents=True, exist_ok=True)
    (root / "effective_config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    log.info("artifact root: %s", root)
    return cfg, root


def _require_corpus(cfg):
    path = cfg["paths"]["corpus"]
    if not path:
        raise ConfigError("paths.corpus is required for this command")
    return load_corpus(path)


def _queries_path(ns, cfg, root: Path) -> Path:
    if getattr(ns, "queries", None):
        return Path(ns.queries)
    if cfg["paths"]["queries"]:
        return Path(cfg["paths"]["queries"])
    return root / F_QUERIES_QC


def _load_assets(cfg, root: Path) -> RetrievalAssets:
    corpus = _require_corpus(cfg)
    for path in (root / F_VOCAB, root / F_IDENTIFIERS, root / F_SEQUENCES):
        if not path.exists():
            raise PipelineError(f"missing artifact {path}; run build-trie first")
    vocab = Vocabulary.load(root / F_VOCAB)
    connectors = load_connectors(root / F_IDENTIFIERS)
    sequences = load_sequences(root / F_SEQUENCES)
    return RetrievalAssets(
        corpus=corpus, vocab=vocab, connectors=connectors, sequences=sequences, trie=build_trie(sequences)
    )


def _load_trained_model(cfg, root: Path, assets: RetrievalAssets, prefer_finetuned=True):
    candidates = []
    if cfg["paths"]["model"]:
        candidates.append(Path(cfg["paths"]["model"]))
    if prefer_finetuned:
        candidates.append(root / F_MODEL_FT)
    candidates.append(root / F_MODEL)
    for path in candidates:
        if path.exists():
            model = load_model(path)
            want = vocab_fingerprint(assets.vocab)
            if model.vocab_hash is not None and model.vocab_hash != want:
                raise IntegrityError(f"{path}: checkpoint was trained against a different vocabulary")
            log.info("loaded model from %s", path)
            return model
    raise PipelineError("no model checkpoint found; run pretrain (and finetune) first")


def cmd_gen_connectors(ns, cfg, root: Path) -> None:
    backend = make_backend(cfg)
    m, n = cfg["connector"]["m"], cfg["connector"]["n"]
    if ns.kind in ("d", "both"):
        corpus = _require_corpus(cfg)
        connectors = {doc.doc_id: gen_d_connector(doc, m, backend) for doc in corpus}
        save_connectors(connectors, root / F_D_CONNECTORS)
        log.info("wrote %d d-connectors to %s", len(connectors), root / F_D_CONNECTORS)
    if ns.kind in ("q", "both"):
        path = getattr(ns, "queries", None) or cfg["paths"]["queries"]
        if not path:
            if ns.kind == "q":
                raise ConfigError("Q-Connectors need --queries or paths.queries")
            log.info("no queries file configured; skipping q-connectors")
            return
        queries = attach_q_connectors(load_queries(path), backend, n)
        save_queries(queries, root / F_QUERIES_QC)
        log.info("wrote %d queries with q-connectors to %s", len(queries), root / F_QUERIES_QC)


def cmd_gen_pseudo(ns, cfg, root: Path) -> None:
    corpus = _require_corpus(cfg)
    pairs = gen_pseudo_data(
        corpus,
        cfg["pseudo"]["k_per_doc"],
        make_backend(cfg),
        seed=cfg["seed"],
        max_input_len=cfg["model"]["max_input_len"],
    )
    save_pseudo_pairs(pairs, root / F_PSEUDO)
    log.info("wrote %d pseudo pairs to %s", len(pairs), root / F_PSEUDO)


def cmd_build_trie(ns, cfg, root: Path) -> None:
    from .pipeline import build_assets

    corpus = _require_corpus(cfg)
    if cfg["ablation"]["use_d_connector"]:
        conn_path = cfg["paths"]["connectors"] or root / F_D_CONNECTORS
        try:
            corpus.set_connectors(load_connectors(conn_path))
        except FileNotFoundError:
            raise PipelineError(f"no connectors at {conn_path}; run gen-connectors first") from None
    queries = []
    qpath = _queries_path(ns, cfg, root)
    if qpath.exists():
        queries = load_queries(qpath, corpus)
    assets = build_assets(
        corpus, queries=queries, m=cfg["connector"]["m"], use_d_connector=cfg["ablation"]["use_d_connector"]
    )
    assets.vocab.save(root / F_VOCAB)
    save_sequences(assets.sequences, root / F_SEQUENCES)
    save_connectors(assets.connectors, root / F_IDENTIFIERS)
    log.info(
        "vocab of %d tokens, %d identifier sequences, trie of %d nodes",
        len(assets.vocab),
        len(assets.sequences),
        assets.trie.num_nodes,
    )


def cmd_pretrain(ns, cfg, root: Path) -> None:
    assets = _load_assets(cfg, root)
    try:
        pairs = load_pseudo_pairs(root / F_PSEUDO)
    except FileNotFoundError:
        raise PipelineError(f"no pseudo pairs at {root / F_PSEUDO}; run gen-pseudo first") from None
    model = init_model(make_model_config(cfg, len(assets.vocab)))
    _, rows = pretrain(
        model, assets, pairs, make_train_config(cfg), seed=cfg["seed"], log_path=root / "pretrain_log.csv"
    )
    save_model(model, root / F_MODEL, vocab_hash=vocab_fingerprint(assets.vocab))
    log.info("pretrained %d steps, final joint loss %.4f; saved %s", len(rows), rows[-1][3], root / F_MODEL)


def cmd_finetune(ns, cfg, root: Path) -> None:
    assets = _load_assets(cfg, root)
    model = _load_trained_model(cfg, root, assets, prefer_finetuned=False)
    queries = load_queries(_queries_path(ns, cfg, root), assets.corpus)
    _, rows, skipped = finetune(
        model,
        assets,
        queries,
        make_train_config(cfg),
        seed=cfg["seed"],
        log_path=root / "finetune_log.csv",
        use_q_connector=cfg["ablation"]["use_q_connector"],
    )
    save_model(model, root / F_MODEL_FT, vocab_hash=vocab_fingerprint(assets.vocab))
    log.info(
        "finetuned %d steps (%d queries skipped), final joint loss %.4f; saved %s",
        len(rows),
        len(skipped),
        rows[-1][3],
        root / F_MODEL_FT,
    )


def _base_states(cfg, assets, model, queries):
    backend = make_backend(cfg) if cfg["ablation"]["use_q_connector"] else None
    states = {}
    for q in queries:
        states[q.query_id] = run_base(
            model,
            assets,
            q,
            backend=backend,
            beam_size=cfg["decode"]["beam_size"],
            n=cfg["connector"]["n"],
            use_q_connector=cfg["ablation"]["use_q_connector"],
            answer_max_len=cfg["decode"]["answer_max_len"],
        )
    return states


def cmd_retrieve(ns, cfg, root: Path) -> None:
    assets = _load_assets(cfg, root)
    model = _load_trained_model(cfg, root, assets)
    queries = load_queries(_queries_path(ns, cfg, root), assets.corpus)
    run = states_to_run(_base_states(cfg, assets, model, queries))
    write_run(root / F_RUN, run.rankings, run.answers)
    log.info("wrote run for %d queries to %s", len(queries), root / F_RUN)


def cmd_answer(ns, cfg, root: Path) -> None:
    assets = _load_assets(cfg, root)
    model = _load_trained_model(cfg, root, assets)
    queries = load_queries(_queries_path(ns, cfg, root), assets.corpus)
    use_qc = cfg["ablation"]["use_q_connector"]
    backend = make_backend(cfg) if use_qc else None
    rankings, answers = {}, {}
    for q in queries:
        q_connector = q.q_connector
        if use_qc and not q_connector:
            from .connectors import gen_q_connector

            q_connector = gen_q_connector(q.query, cfg["connector"]["n"], backend)
        tokens = _encode_input(
            assets.vocab, query_input_text(q.query, q_connector, use_qc), model.config.max_input_len
        )
        state = encode_input(model, tokens)
        answer = assets.vocab.decode(greedy_decode(model, QA_HEAD, state, cfg["decode"]["answer_max_len"]))
        rankings[q.query_id] = []
        answers[q.query_id] = answer
    write_run(root / F_ANSWER_RUN, rankings, answers)
    log.info("wrote answers for %d queries to %s", len(queries), root / F_ANSWER_RUN)


def cmd_run_iter(ns, cfg, root: Path) -> None:
    assets = _load_assets(cfg, root)
    model = _load_trained_model(cfg, root, assets)
    queries = load_queries(_queries_path(ns, cfg, root), assets.corpus)
    backend = make_backend(cfg)
    runs = {}
    for q in queries:
        runs[q.query_id] = run_iter(
            model,
            assets,
            q,
            backend,
            iterations=cfg["iter"]["iterations"],
            beam_size=cfg["decode"]["beam_size"],
            n=cfg["connector"]["n"],
            k_docs=cfg["iter"]["k_docs"],
            max_doc_words=cfg["iter"]["max_doc_words"],
            use_q_connector=cfg["ablation"]["use_q_connector"],
            answer_max_len=cfg["decode"]["answer_max_len"],
        )
    partial = [qid for qid, r in runs.items() if r.partial]
    if partial:
        log.warning("%d queries ended with partial iteration runs: %s", len(partial), partial[:5])
    rounds = max(len(r.states) for r in runs.values())
    for rnd in range(rounds):
        at_round = {qid: r.states[rnd] for qid, r in runs.items() if len(r.states) > rnd}
        run = states_to_run(at_round)
        write_run(root / f"run_round{rnd}.jsonl", run.rankings, run.answers)
    final = states_to_run({qid: r.states[-1] for qid, r in runs.items()})
    write_run(root / F_RUN, final.rankings, final.answers)
    log.info("wrote %d iteration rounds and the final run to %s", rounds, root)


def cmd_evaluate(ns, cfg, root: Path) -> None:
    run_path = Path(ns.run) if ns.run else root / F_RUN
    run = read_run(run_path)
    queries = load_queries(_queries_path(ns, cfg, root))
    report = evaluate_run(
        run,
        queries,
        make_metric_config(cfg),
        run_id=run_path.stem,
        config_hash=config_hash(cfg),
    )
    write_eval_report(report, root / F_REPORT)
    log.info("wrote %s", root / F_REPORT)
    print(json.dumps(report["aggregate"], sort_keys=True))


def cmd_curves(ns, cfg, root: Path) -> None:
    import csv as _csv

    metric_config = make_metric_config(cfg)
    queries = load_queries(_queries_path(ns, cfg, root))
    if ns.kind == "iteration":
        rows = []
        rnd = 0
        while (root / f"run_round{rnd}.jsonl").exists():
            report = evaluate_run(read_run(root / f"run_round{rnd}.jsonl"), queries, metric_config)
            rows.append((rnd, report["aggregate"][f"mrr@{metric_config.max_k}"], report["aggregate"]["em"]))
            rnd += 1
        if not rows:
            raise PipelineError(f"no run_round*.jsonl files in {root}; run run-iter first")
        with open(root / F_ITER_CURVE, "w", newline="", encoding="utf-8") as f:
            writer = _csv.writer(f)
            writer.writerow(["iteration", "mrr10", "qa_metric"])
            for rnd, mrr, qa in rows:
                writer.writerow([rnd, f"{mrr:.6f}", f"{qa:.6f}"])
        log.info("wrote %s (%d rounds)", root / F_ITER_CURVE, len(rows))
        return
    # learning curve: refit from the pretrained checkpoint, evaluating after
    # each epoch; the finetuned artifact on disk is left untouched.
    assets = _load_assets(cfg, root)
    model = _load_trained_model(cfg, root, assets, prefer_finetuned=False)
    queries_checked = load_queries(_queries_path(ns, cfg, root), assets.corpus)
    rows = []

    def hook(epoch, current_model):
        states = _base_states(cfg, assets, current_model, queries_checked)
        report = evaluate_run(states_to_run(states), queries_checked, metric_config)
        rows.append((epoch, report["aggregate"][f"mrr@{metric_config.max_k}"], report["aggregate"]["em"]))

    finetune(
        model,
        assets,
        queries_checked,
        make_train_config(cfg),
        seed=cfg["seed"],
        use_q_connector=cfg["ablation"]["use_q_connector"],
        epoch_hook=hook,
    )
    write_learning_curve(rows, root / F_LEARN_CURVE)
    log.info("wrote %s (%d epochs)", root / F_LEARN_CURVE, len(rows))


_COMMANDS = {
    "gen-connectors": cmd_gen_connectors,
    "gen-pseudo": cmd_gen_pseudo,
    "build-trie": cmd_build_trie,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "retrieve": cmd_retrieve,
    "answer": cmd_answer,
    "run-iter": cmd_run_iter,
    "evaluate": cmd_evaluate,
    "curves": cmd_curves,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        ns, extra = parser.parse_known_args(argv)
        cfg, root = _setup(ns, extra)
        _COMMANDS[ns.command](ns, cfg, root)
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except Exception as e:
        log.error("%s: %s", type(e).__name__, e)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

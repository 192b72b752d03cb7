import csv
import json
import math

import pytest

from unigen.connectors import ConnectorError, StubBackend
from unigen.corpus import EOS_ID, Corpus, Document, QueryRecord, Run
from unigen.decoding import RetrievalResult
from unigen.metrics import MetricConfig
from unigen.model import ModelConfig, TrainConfig, init_model
from unigen.pipeline import (
    SEPARATOR,
    IterRun,
    IterState,
    PipelineError,
    PseudoPair,
    attach_q_connectors,
    build_assets,
    evaluate_run,
    finetune,
    finetune_items,
    gen_pseudo_data,
    load_pseudo_pairs,
    pretrain,
    pretrain_items,
    query_input_text,
    report_to_json,
    run_ablation,
    run_base,
    run_experiment,
    run_iter,
    save_pseudo_pairs,
    states_to_run,
    write_ablation_report,
    write_iteration_curve,
    write_learning_curve,
)


def tiny_train_config(**kw):
    base = dict(epochs=1, batch_size=4, learning_rate=1e-3, warmup_steps=2)
    base.update(kw)
    return TrainConfig(**base)


def experiment_model_fields():
    return dict(
        embed_dim=8,
        hidden_dim=16,
        encoder_layers=1,
        decoder_layers=1,
        num_heads=2,
        max_input_len=24,
        max_output_len=12,
    )


class TestBuildAssets:
    def test_generates_connectors_for_every_doc(self, tiny_corpus, stub_backend):
        assets = build_assets(tiny_corpus, backend=stub_backend, m=4)
        assert set(assets.connectors) == {"d1", "d2", "d3"}
        assert len(assets.trie) == 3
        assert all(seq.tokens[-1] == EOS_ID for seq in assets.sequences)

    def test_reuses_stored_connectors(self, tiny_corpus):
        stored = {"d1": "alpha", "d2": "beta", "d3": "gamma"}
        corpus = Corpus(list(tiny_corpus), d_connectors=stored)
        assets = build_assets(corpus, backend=None)
        assert assets.connectors == stored

    def test_fallback_identifiers_without_d_connector(self, tiny_corpus):
        assets = build_assets(tiny_corpus, use_d_connector=False, m=4)
        assert assets.connectors["d1"] == "red fox the red"

    def test_missing_backend_rejected(self, tiny_corpus):
        with pytest.raises(PipelineError, match="no backend"):
            build_assets(tiny_corpus, backend=None)

    def test_empty_corpus_rejected(self, stub_backend):
        with pytest.raises(PipelineError, match="empty corpus"):
            build_assets(Corpus([]), backend=stub_backend)

    def test_identical_docs_get_disambiguated(self, stub_backend):
        text = "The same words repeat here exactly."
        corpus = Corpus([Document(doc_id=f"d{i}", text=text, title="twin") for i in range(2)])
        assets = build_assets(corpus, backend=stub_backend, m=4)
        values = list(assets.connectors.values())
        assert len(set(values)) == 2
        assert any(v.endswith("#2") for v in values)

    def test_explicit_vocab_is_used(self, tiny_corpus, tiny_vocab, stub_backend):
        assets = build_assets(tiny_corpus, backend=stub_backend, m=4, vocab=tiny_vocab)
        assert assets.vocab is tiny_vocab

    def test_docid_tokens_lookup(self, tiny_corpus, stub_backend):
        assets = build_assets(tiny_corpus, backend=stub_backend, m=4)
        assert assets.docid_tokens("d1") == assets.sequences[0].tokens
        with pytest.raises(PipelineError, match="no identifier"):
            assets.docid_tokens("ghost")


class TestPseudoData:
    def test_counts_and_coverage(self, tiny_corpus, stub_backend):
        pairs = gen_pseudo_data(tiny_corpus, 3, stub_backend)
        assert len(pairs) == 9
        assert {p.doc_id for p in pairs} == {"d1", "d2", "d3"}

    def test_deterministic_per_seed(self, tiny_corpus, stub_backend):
        a = gen_pseudo_data(tiny_corpus, 2, stub_backend, seed=0)
        b = gen_pseudo_data(tiny_corpus, 2, stub_backend, seed=0)
        assert a == b
        c = gen_pseudo_data(tiny_corpus, 2, stub_backend, seed=1)
        assert c != a

    def test_input_text_shape(self, tiny_corpus, stub_backend):
        from unigen.corpus import tokenize

        for p in gen_pseudo_data(tiny_corpus, 2, stub_backend, max_input_len=16):
            assert p.input_text.startswith(p.pseudo_query + f" {SEPARATOR} ")
            assert len(tokenize(p.input_text)) <= 16

    def test_k_must_be_positive(self, tiny_corpus, stub_backend):
        with pytest.raises(PipelineError, match="k_per_doc"):
            gen_pseudo_data(tiny_corpus, 0, stub_backend)

    def test_unparseable_response_names_the_doc(self, tiny_corpus):
        class Garbage:
            model = "g"

            def generate(self, prompt):
                return "no structure at all"

        with pytest.raises(ConnectorError, match="d1"):
            gen_pseudo_data(tiny_corpus, 1, Garbage())

    def test_save_load_roundtrip(self, tiny_corpus, stub_backend, tmp_path):
        pairs = gen_pseudo_data(tiny_corpus, 2, stub_backend)
        path = tmp_path / "pseudo.jsonl"
        save_pseudo_pairs(pairs, path)
        assert load_pseudo_pairs(path) == pairs

    def test_load_rejects_bad_record(self, tmp_path):
        path = tmp_path / "pseudo.jsonl"
        path.write_text('{"doc_id": "d1"}\n', encoding="utf-8")
        with pytest.raises(PipelineError, match="bad pseudo-pair record"):
            load_pseudo_pairs(path)

    def test_empty_answer_rejected(self):
        with pytest.raises(PipelineError, match="empty answer"):
            PseudoPair(doc_id="d", pseudo_query="q", pseudo_answer="  ", input_text="x")


class TestTrainItems:
    def test_pretrain_items_map_identifiers(self, tiny_corpus, stub_backend):
        assets = build_assets(tiny_corpus, backend=stub_backend, m=4)
        pairs = gen_pseudo_data(tiny_corpus, 1, stub_backend)
        config = ModelConfig(vocab_size=len(assets.vocab), **experiment_model_fields())
        items = pretrain_items(pairs, assets, config)
        assert len(items) == len(pairs)
        for item, pair in zip(items, pairs):
            assert item.stage == "pretrain"
            assert item.docid_tokens == assets.docid_tokens(pair.doc_id)
            assert item.answer_tokens[-1] == EOS_ID
            assert len(item.input_tokens) <= config.max_input_len

    def test_finetune_items_and_skips(self, tiny_corpus, stub_backend):
        assets = build_assets(tiny_corpus, backend=stub_backend, m=4)
        config = ModelConfig(vocab_size=len(assets.vocab), **experiment_model_fields())
        queries = [
            QueryRecord(query_id="ok", query="red fox", answer="jumps", relevant_doc_ids=frozenset({"d1", "d2"}), q_connector="ctx"),
            QueryRecord(query_id="no_ctx", query="x", answer="y", relevant_doc_ids=frozenset({"d1"})),
            QueryRecord(query_id="no_ans", query="x", answer=None, relevant_doc_ids=frozenset({"d1"}), q_connector="ctx"),
            QueryRecord(query_id="no_gold", query="x", answer="y", relevant_doc_ids=frozenset({"zz"}), q_connector="ctx"),
        ]
        items, skipped = finetune_items(queries, assets, config)
        assert len(items) == 2
        assert all(it.stage == "finetune" for it in items)
        assert dict(skipped) == {
            "no_ctx": "missing q_connector",
            "no_ans": "missing answer",
            "no_gold": "no relevant doc with an identifier",
        }

    def test_finetune_items_without_connectors(self, tiny_corpus, stub_backend):
        assets = build_assets(tiny_corpus, backend=stub_backend, m=4)
        config = ModelConfig(vocab_size=len(assets.vocab), **experiment_model_fields())
        queries = [QueryRecord(query_id="a", query="red fox", answer="jumps", relevant_doc_ids=frozenset({"d1"}))]
        items, skipped = finetune_items(queries, assets, config, use_q_connector=False)
        assert len(items) == 1 and not skipped

    def test_query_input_text(self):
        assert query_input_text("q", "ctx") == f"q {SEPARATOR} ctx"
        assert query_input_text("q", None) == "q"
        assert query_input_text("q", "ctx", use_q_connector=False) == "q"


class TestTraining:
    def _setup(self, corpus, backend):
        assets = build_assets(corpus, backend=backend, m=4)
        model = init_model(ModelConfig(vocab_size=len(assets.vocab), seed=3, **experiment_model_fields()))
        return assets, model

    def test_pretrain_logs_rows(self, tiny_corpus, stub_backend, tmp_path):
        assets, model = self._setup(tiny_corpus, stub_backend)
        pairs = gen_pseudo_data(tiny_corpus, 2, stub_backend)
        log_path = tmp_path / "loss.csv"
        _, rows = pretrain(model, assets, pairs, tiny_train_config(epochs=2), log_path=log_path)
        assert len(rows) == 2 * math.ceil(len(pairs) / 4)
        assert rows[0][0] == 1 and rows[-1][0] == len(rows)
        with open(log_path, newline="") as f:
            got = list(csv.reader(f))
        assert got[0] == ["step", "loss_retr", "loss_qa", "loss_joint"]
        assert len(got) == len(rows) + 1

    def test_pretrain_requires_pairs(self, tiny_corpus, stub_backend):
        assets, model = self._setup(tiny_corpus, stub_backend)
        with pytest.raises(PipelineError, match="no pseudo pairs"):
            pretrain(model, assets, [], tiny_train_config())

    def test_finetune_reports_skips(self, tiny_corpus, tiny_queries, stub_backend):
        assets, model = self._setup(tiny_corpus, stub_backend)
        queries = attach_q_connectors(tiny_queries, stub_backend) + [
            QueryRecord(query_id="bad", query="x", answer="y", relevant_doc_ids=frozenset({"nope"}), q_connector="c")
        ]
        _, rows, skipped = finetune(model, assets, queries, tiny_train_config())
        assert rows
        assert skipped == [("bad", "no relevant doc with an identifier")]

    def test_stage_purity_enforced(self, tiny_corpus, stub_backend):
        from unigen.pipeline import _run_training

        assets, model = self._setup(tiny_corpus, stub_backend)
        pairs = gen_pseudo_data(tiny_corpus, 1, stub_backend)
        config = model.config
        items = pretrain_items(pairs, assets, config)
        with pytest.raises(PipelineError, match="finetune got items from stage"):
            _run_training(model, items, tiny_train_config(), "finetune")

    def test_epoch_hook_called_each_epoch(self, tiny_corpus, stub_backend):
        assets, model = self._setup(tiny_corpus, stub_backend)
        pairs = gen_pseudo_data(tiny_corpus, 1, stub_backend)
        seen = []
        pretrain(model, assets, pairs, tiny_train_config(epochs=3), epoch_hook=lambda e, m: seen.append(e))
        assert seen == [0, 1, 2]


class TestInference:
    def _trained(self, corpus, queries, backend):
        assets = build_assets(corpus, backend=backend, m=4)
        model = init_model(ModelConfig(vocab_size=len(assets.vocab), seed=3, **experiment_model_fields()))
        pairs = gen_pseudo_data(corpus, 1, backend)
        pretrain(model, assets, pairs, tiny_train_config())
        return assets, model

    def test_run_base_round_zero(self, tiny_corpus, tiny_queries, stub_backend):
        assets, model = self._trained(tiny_corpus, tiny_queries, stub_backend)
        state = run_base(model, assets, tiny_queries[0], backend=stub_backend, beam_size=3)
        assert state.round == 0
        assert state.q_connector
        assert 1 <= len(state.ranking) <= 3
        assert isinstance(state.answer, str)

    def test_run_base_needs_backend_for_missing_connector(self, tiny_corpus, tiny_queries, stub_backend):
        assets, model = self._trained(tiny_corpus, tiny_queries, stub_backend)
        with pytest.raises(PipelineError, match="no q_connector and no backend"):
            run_base(model, assets, tiny_queries[0], backend=None)

    def test_run_base_bare_query_mode(self, tiny_corpus, tiny_queries, stub_backend):
        assets, model = self._trained(tiny_corpus, tiny_queries, stub_backend)
        state = run_base(model, assets, tiny_queries[0], backend=None, use_q_connector=False)
        assert state.q_connector is None

    def test_run_iter_zero_iterations_matches_run_base(self, tiny_corpus, tiny_queries, stub_backend):
        assets, model = self._trained(tiny_corpus, tiny_queries, stub_backend)
        base = run_base(model, assets, tiny_queries[0], backend=stub_backend, beam_size=3)
        run = run_iter(model, assets, tiny_queries[0], stub_backend, iterations=0, beam_size=3)
        assert not run.partial
        assert len(run.states) == 1
        assert run.states[0].ranking.ranking == base.ranking.ranking
        assert run.states[0].answer == base.answer

    def test_run_iter_produces_numbered_rounds(self, tiny_corpus, tiny_queries, stub_backend):
        assets, model = self._trained(tiny_corpus, tiny_queries, stub_backend)
        run = run_iter(model, assets, tiny_queries[0], stub_backend, iterations=2, beam_size=3, k_docs=1)
        assert [s.round for s in run.states] == [0, 1, 2]
        assert all(s.q_connector for s in run.states)

    def test_run_iter_partial_on_backend_failure(self, tiny_corpus, tiny_queries, stub_backend):
        class FlakyIter:
            model = "flaky"

            def generate(self, prompt):
                if prompt.startswith("Given the following potentially relevant documents"):
                    raise ConnectorError("iteration backend down")
                return StubBackend().generate(prompt)

        assets, model = self._trained(tiny_corpus, tiny_queries, stub_backend)
        run = run_iter(model, assets, tiny_queries[0], FlakyIter(), iterations=2, beam_size=3)
        assert run.partial
        assert "iteration backend down" in run.error
        assert len(run.states) == 1

    def test_run_iter_negative_iterations(self, tiny_corpus, tiny_queries, stub_backend):
        assets, model = self._trained(tiny_corpus, tiny_queries, stub_backend)
        with pytest.raises(PipelineError, match="iterations"):
            run_iter(model, assets, tiny_queries[0], stub_backend, iterations=-1)


def perfect_and_missing_run():
    run = Run(
        rankings={"q1": [("d1", -0.5), ("d2", -1.0)], "q2": [("d3", -0.2), ("d1", -0.9)]},
        answers={"q1": "jumps", "q2": "nothing relevant"},
    )
    queries = [
        QueryRecord(query_id="q1", query="a", answer="jumps", relevant_doc_ids=frozenset({"d1"})),
        QueryRecord(query_id="q2", query="b", answer="ocean", relevant_doc_ids=frozenset({"d2"})),
    ]
    return run, queries


class TestEvaluateRun:
    def test_hand_oracle(self):
        # q1: gold at rank 1 -> rr 1; q2: gold absent -> rr 0; MRR 0.5
        run, queries = perfect_and_missing_run()
        report = evaluate_run(run, queries, MetricConfig(k_values=(1, 2)))
        assert report["aggregate"]["mrr@2"] == pytest.approx(0.5)
        assert report["aggregate"]["r@1"] == pytest.approx(0.5)
        assert report["aggregate"]["r@2"] == pytest.approx(0.5)
        assert report["aggregate"]["em"] == pytest.approx(0.5)
        rows = {row["query_id"]: row for row in report["per_query"]}
        assert rows["q1"]["rank_of_gold"] == 1
        assert rows["q2"]["rank_of_gold"] is None
        assert rows["q1"]["recall_hits"] == {"1": 1, "2": 1}
        assert rows["q1"]["em"] == 1.0 and rows["q2"]["em"] == 0.0

    def test_empty_run_rejected(self):
        _, queries = perfect_and_missing_run()
        with pytest.raises(PipelineError, match="empty run"):
            evaluate_run(Run(rankings={}, answers={}), queries)

    def test_unknown_query_rejected(self):
        run, _ = perfect_and_missing_run()
        with pytest.raises(PipelineError, match="unknown query_id"):
            evaluate_run(run, [])

    def test_query_without_relevant_ids_rejected(self):
        run = Run(rankings={"q1": [("d1", -0.5)]}, answers={"q1": "x"})
        queries = [QueryRecord(query_id="q1", query="a", answer="x", relevant_doc_ids=frozenset())]
        with pytest.raises(PipelineError, match="no relevant_doc_ids"):
            evaluate_run(run, queries)

    def test_report_json_is_canonical(self):
        run, queries = perfect_and_missing_run()
        report = evaluate_run(run, queries, run_id="r1", config_hash="abc")
        text = report_to_json(report)
        assert text.endswith("\n")
        parsed = json.loads(text)
        assert parsed["run_id"] == "r1" and parsed["config_hash"] == "abc"
        assert text == report_to_json(parsed)


def fake_iter_run(ranks_by_round, answers_by_round, gold="d1"):
    """IterRun whose gold doc sits at the requested rank (None: absent) each round."""
    states = []
    for rnd, (rank, ans) in enumerate(zip(ranks_by_round, answers_by_round)):
        filler = (f"x{rnd}{i}" for i in range(9))
        doc_ids = [gold if pos == rank else next(filler) for pos in range(1, 4)]
        ranking = tuple((d, -0.1 * pos) for pos, d in enumerate(doc_ids, start=1))
        states.append(IterState(round=rnd, q_connector="c", ranking=RetrievalResult(ranking), answer=ans))
    return IterRun(states=tuple(states))


class TestCurves:
    def test_iteration_curve_csv(self, tmp_path):
        runs = {
            "q1": fake_iter_run([2, 1], ["wrong", "gold words"]),
            "q2": fake_iter_run([1, 1], ["gold words", "gold words"]),
        }
        queries = [
            QueryRecord(query_id="q1", query="a", answer="gold words", relevant_doc_ids=frozenset({"d1"})),
            QueryRecord(query_id="q2", query="b", answer="gold words", relevant_doc_ids=frozenset({"d1"})),
        ]
        path = tmp_path / "iter.csv"
        rows = write_iteration_curve(runs, queries, path, MetricConfig(k_values=(1,)))
        assert [r[0] for r in rows] == [0, 1]
        assert rows[1][1] >= rows[0][1]
        with open(path, newline="") as f:
            got = list(csv.reader(f))
        assert got[0] == ["iteration", "mrr10", "qa_metric"]
        assert len(got) == 3

    def test_learning_curve_csv(self, tmp_path):
        path = tmp_path / "learn.csv"
        write_learning_curve([(0, 0.5, 0.1), (1, 0.75, 0.2)], path)
        with open(path, newline="") as f:
            got = list(csv.reader(f))
        assert got[0] == ["epoch", "mrr10", "qa_metric"]
        assert got[1] == ["0", "0.500000", "0.100000"]


class TestStatesToRun:
    def test_mapping(self):
        st = IterState(
            round=0,
            q_connector=None,
            ranking=RetrievalResult(ranking=(("d1", -0.1), ("d2", -0.3))),
            answer="fox",
        )
        run = states_to_run({"q1": st})
        assert run.rankings == {"q1": [("d1", -0.1), ("d2", -0.3)]}
        assert run.answers == {"q1": "fox"}


class TestAttachQConnectors:
    def test_fills_only_missing(self, tiny_queries, stub_backend):
        from dataclasses import replace

        queries = [tiny_queries[0], replace(tiny_queries[1], q_connector="kept")]
        out = attach_q_connectors(queries, stub_backend, n=16)
        assert out[0].q_connector and out[0].q_connector != tiny_queries[0].query
        assert out[1].q_connector == "kept"


class TestExperiment:
    def test_full_recipe_smoke(self, tiny_corpus, tiny_queries, stub_backend):
        result = run_experiment(
            tiny_corpus,
            tiny_queries,
            tiny_queries,
            stub_backend,
            k_pseudo=1,
            m=4,
            n=16,
            beam_size=3,
            model_fields=experiment_model_fields(),
            pretrain_config=tiny_train_config(),
            finetune_config=tiny_train_config(),
            metric_config=MetricConfig(k_values=(1, 3)),
            run_id="smoke",
        )
        agg = result.report["aggregate"]
        assert set(agg) == {"mrr@3", "r@1", "r@3", "bleu1", "rouge_l", "em", "f1"}
        assert set(result.runs) == {"q1", "q2"}
        assert result.report["run_id"] == "smoke"

    def test_ablation_rows(self, tiny_corpus, tiny_queries, stub_backend, tmp_path):
        rows = run_ablation(
            tiny_corpus,
            tiny_queries,
            tiny_queries,
            stub_backend,
            k_pseudo=1,
            m=4,
            n=16,
            beam_size=3,
            model_fields=experiment_model_fields(),
            pretrain_config=tiny_train_config(),
            finetune_config=tiny_train_config(),
            metric_config=MetricConfig(k_values=(1, 10)),
        )
        assert [r["name"] for r in rows] == [
            "full",
            "w/o shared encoder",
            "w/o Q-Connector",
            "w/o D-Connector",
        ]
        path = tmp_path / "ablation.csv"
        write_ablation_report(rows, path)
        with open(path, newline="") as f:
            got = list(csv.reader(f))
        assert got[0] == ["name", "mrr@10", "r@1", "em", "f1"]
        assert len(got) == 5

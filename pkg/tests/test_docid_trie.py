import random

import pytest

from unigen.corpus import EOS_ID, build_vocab
from unigen.docid_trie import (
    DocidSequence,
    TrieError,
    UnresolvableSequenceError,
    build_trie,
    disambiguate,
    load_sequences,
    save_sequences,
    sequences_from_connectors,
)


def seq(doc_id, *tokens):
    return DocidSequence(doc_id=doc_id, tokens=tuple(tokens) + (EOS_ID,))


class TestDocidSequence:
    def test_requires_eos_tail(self):
        with pytest.raises(TrieError):
            DocidSequence(doc_id="d", tokens=(5, 6))

    def test_requires_single_eos(self):
        with pytest.raises(TrieError):
            DocidSequence(doc_id="d", tokens=(EOS_ID, 5, EOS_ID))

    def test_rejects_empty(self):
        with pytest.raises(TrieError):
            DocidSequence(doc_id="d", tokens=())

    def test_coerces_ints(self):
        s = DocidSequence(doc_id="d", tokens=(5.0, float(EOS_ID)))
        assert s.tokens == (5, EOS_ID)


class TestDisambiguate:
    def test_distinct_unchanged(self):
        texts = {"a": "red fox", "b": "blue whale"}
        assert disambiguate(texts) == texts

    def test_collision_gets_numbered_suffix(self):
        texts = {"a": "same words", "b": "same words", "c": "same words"}
        out = disambiguate(texts)
        # first doc_id in lexicographic order keeps the original
        assert out["a"] == "same words"
        assert out["b"] == "same words #2"
        assert out["c"] == "same words #3"

    def test_collision_detected_after_normalization(self):
        out = disambiguate({"a": "Red Fox!", "b": "red fox"})
        assert out["a"] == "Red Fox!"
        assert out["b"] == "red fox #2"

    def test_suffix_skips_taken_keys(self):
        # "x #2" already exists as another doc's text, so the clash jumps to #3
        out = disambiguate({"a": "x", "b": "x", "c": "x #2"})
        assert out["a"] == "x"
        assert out["b"] == "x #3"
        assert out["c"] == "x #2"

    def test_idempotent(self):
        texts = {"a": "same words", "b": "same words"}
        once = disambiguate(texts)
        assert disambiguate(once) == once

    def test_result_is_injective_after_tokenization(self):
        from unigen.corpus import tokenize

        texts = {f"d{i}": "common title" for i in range(12)}
        out = disambiguate(texts)
        keys = {tuple(tokenize(t)) for t in out.values()}
        assert len(keys) == len(texts)


class TestSequencesFromConnectors:
    def test_appends_eos(self, tiny_vocab):
        seqs = sequences_from_connectors({"d1": "red fox"}, tiny_vocab)
        assert seqs[0].tokens[-1] == EOS_ID
        assert len(seqs[0].tokens) == 3

    def test_unk_collapse_raises(self):
        vocab = build_vocab(["completely different words"])
        # both connectors encode to pure-UNK sequences of equal length
        with pytest.raises(TrieError, match="collide"):
            sequences_from_connectors({"a": "alpha beta", "b": "gamma delta"}, vocab)


class TestTrie:
    def test_insert_and_resolve(self):
        trie = build_trie([seq("a", 5, 6), seq("b", 5, 7)])
        assert trie.resolve([5, 6, EOS_ID]) == "a"
        assert trie.resolve([5, 7, EOS_ID]) == "b"
        assert len(trie) == 2

    def test_duplicate_sequence_rejected(self):
        with pytest.raises(TrieError):
            build_trie([seq("a", 5), seq("b", 5)])

    def test_allowed_next_at_root(self):
        trie = build_trie([seq("a", 5, 6), seq("b", 7)])
        assert trie.allowed_next(()) == {5, 7}

    def test_allowed_next_mid_path(self):
        trie = build_trie([seq("a", 5, 6), seq("b", 5, 7)])
        assert trie.allowed_next((5,)) == {6, 7}

    def test_allowed_next_terminal_empty(self):
        trie = build_trie([seq("a", 5)])
        assert trie.allowed_next((5, EOS_ID)) == set()

    def test_allowed_next_absent_prefix_empty(self):
        trie = build_trie([seq("a", 5)])
        assert trie.allowed_next((9,)) == set()

    def test_resolve_incomplete_raises(self):
        trie = build_trie([seq("a", 5, 6)])
        with pytest.raises(UnresolvableSequenceError):
            trie.resolve([5, 6])

    def test_resolve_unknown_raises(self):
        trie = build_trie([seq("a", 5, 6)])
        with pytest.raises(UnresolvableSequenceError):
            trie.resolve([9, EOS_ID])

    def test_prefix_property(self):
        # one sequence may not be a strict prefix of another: EOS uniqueness
        # makes that impossible by construction, terminals have no children
        trie = build_trie([seq("a", 5, 6), seq("b", 5, 6, 7)])
        term = trie.node_for_prefix((5, 6, EOS_ID))
        assert trie.is_terminal(term)
        assert trie.children(term) == {}

    def test_sequences_roundtrip(self):
        inserted = [seq("a", 5, 6), seq("b", 5, 7), seq("c", 8)]
        trie = build_trie(inserted)
        got = sorted(trie.sequences(), key=lambda s: s.doc_id)
        assert got == sorted(inserted, key=lambda s: s.doc_id)

    def test_max_depth_and_nodes(self):
        trie = build_trie([seq("a", 5, 6, 7)])
        assert trie.max_depth == 4
        # root + 4 path nodes
        assert trie.num_nodes == 5

    def test_every_leaf_reachable_property(self):
        # random sequence sets: insert, then every sequence resolves and no
        # prefix off the set walks to a terminal
        rng = random.Random(3)
        for _ in range(25):
            n = rng.randint(1, 30)
            seen = set()
            seqs = []
            for i in range(n):
                body = tuple(rng.randint(4, 12) for _ in range(rng.randint(1, 6)))
                if body in seen:
                    continue
                seen.add(body)
                seqs.append(DocidSequence(doc_id=f"d{i}", tokens=body + (EOS_ID,)))
            trie = build_trie(seqs)
            assert len(trie) == len(seqs)
            for s in seqs:
                assert trie.resolve(s.tokens) == s.doc_id
                # walking the prefix yields exactly the recorded continuations
                for cut in range(len(s.tokens)):
                    allowed = trie.allowed_next(s.tokens[:cut])
                    assert s.tokens[cut] in allowed


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        seqs = [seq("a", 5, 6), seq("b", 7)]
        save_sequences(seqs, tmp_path / "s.jsonl")
        assert load_sequences(tmp_path / "s.jsonl") == seqs

    def test_bad_record(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_text('{"doc_id": "a"}\n')
        with pytest.raises(TrieError):
            load_sequences(path)

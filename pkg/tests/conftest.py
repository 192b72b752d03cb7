import pytest

from unigen.connectors import StubBackend
from unigen.corpus import Corpus, Document, QueryRecord, Vocabulary, build_vocab
from unigen.docid_trie import build_trie, sequences_from_connectors
from unigen.model import ModelConfig, init_model


@pytest.fixture
def tiny_corpus():
    docs = [
        Document(doc_id="d1", text="The red fox jumps over the lazy dog.", title="red fox"),
        Document(doc_id="d2", text="A blue whale swims in the deep ocean.", title="blue whale"),
        Document(doc_id="d3", text="The green turtle walks on warm sand.", title="green turtle"),
    ]
    return Corpus(docs)


@pytest.fixture
def tiny_queries():
    return [
        QueryRecord(query_id="q1", query="what does the red fox do", answer="jumps", relevant_doc_ids=frozenset({"d1"})),
        QueryRecord(query_id="q2", query="where does the blue whale swim", answer="ocean", relevant_doc_ids=frozenset({"d2"})),
    ]


@pytest.fixture
def tiny_vocab(tiny_corpus, tiny_queries):
    texts = [d.text + " " + (d.title or "") for d in tiny_corpus]
    texts += [q.query + " " + (q.answer or "") for q in tiny_queries]
    return build_vocab(texts, min_freq=1)


@pytest.fixture
def tiny_trie(tiny_corpus, tiny_vocab):
    connectors = {d.doc_id: (d.title or d.doc_id) for d in tiny_corpus}
    sequences = sequences_from_connectors(connectors, tiny_vocab)
    return build_trie(sequences)


@pytest.fixture
def tiny_model(tiny_vocab):
    config = ModelConfig(
        vocab_size=len(tiny_vocab),
        embed_dim=16,
        hidden_dim=32,
        encoder_layers=1,
        decoder_layers=1,
        num_heads=2,
        max_input_len=24,
        max_output_len=12,
        seed=7,
    )
    return init_model(config)


@pytest.fixture
def stub_backend():
    return StubBackend()

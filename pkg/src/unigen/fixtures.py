"""Synthetic corpus generator for tests and the bundled demo run.

Each document is built around one invented keyword that appears in every
sentence and in the title, and every query about the document mentions the
keyword and expects it as the answer. That makes retrieval a keyword-to-docid
mapping and QA a copy task, both learnable by a desk-scale model in minutes
while still exercising the whole pipeline.
"""

from __future__ import annotations

import random

from .corpus import Corpus, Document, QueryRecord
from .model import TrainConfig

_CONSONANTS = "bdfglmnprstvz"
_VOWELS = "aeiou"

_ADJECTIVES = ["quiet", "glossy", "sturdy", "pale", "vivid", "rugged", "slender", "mellow"]
_NOUNS = ["plant", "mineral", "bird", "valley", "festival", "instrument", "fabric", "dish"]
_PLACES = ["northern", "coastal", "island", "mountain", "river", "desert", "forest", "plateau"]
_QUALITIES = ["durability", "fragrance", "color", "rarity", "texture", "resonance"]
_FEATURES = ["springs", "cliffs", "meadows", "harbors", "orchards"]
_SEASONS = ["spring", "summer", "autumn", "winter"]

# Many phrasings with the keyword in different positions, so training can
# only succeed by keying on the keyword itself rather than on a template.
_TRAIN_PHRASINGS = [
    "what is the {kw} known for",
    "where does the {kw} come from",
    "why do travelers seek the {kw}",
    "how old is the {kw} tradition",
    "what region produces the {kw}",
    "when do visitors come to the {kw}",
    "what quality makes the {kw} prized",
    "who described the {kw} as a symbol",
    "the {kw} draws people for what reason",
    "is the {kw} a plant or a dish",
]
# Held-out queries are unseen strings built from words that do occur in the
# documents or the training phrasings, so evaluation probes new phrasings
# rather than untrained embeddings.
_HELDOUT_PHRASINGS = [
    "for what is the {kw} known",
    "travelers prize the {kw} for what",
    "what do travelers seek from the {kw}",
    "historians describe the {kw} as what",
    "why is the {kw} prized",
]

_FILLER_WORDS = frozenset(
    w
    for pool in (_ADJECTIVES, _NOUNS, _PLACES, _QUALITIES, _FEATURES, _SEASONS)
    for w in pool
)


def _invent_keywords(n: int, rng: random.Random) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        word = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(3))
        if word in seen or word in _FILLER_WORDS:
            continue
        seen.add(word)
        out.append(word)
    return out


def make_synthetic_dataset(
    n_docs: int = 100, seed: int = 0
) -> tuple[Corpus, list[QueryRecord], list[QueryRecord]]:
    """(corpus, labeled training queries, held-out queries), one of each per doc."""
    rng = random.Random(seed)
    keywords = _invent_keywords(n_docs, rng)
    docs, train_q, heldout_q = [], [], []
    for i, kw in enumerate(keywords):
        adj, adj2 = rng.sample(_ADJECTIVES, 2)
        noun = rng.choice(_NOUNS)
        place, place2 = rng.sample(_PLACES, 2)
        quality = rng.choice(_QUALITIES)
        feature = rng.choice(_FEATURES)
        season = rng.choice(_SEASONS)
        text = " ".join(
            [
                f"The {kw} is a {adj} {noun} of the {place} region.",
                f"Travelers prize the {kw} for its {quality}.",
                f"Every {season} the {kw} draws visitors to the {feature}.",
                f"Historians describe the {kw} as a {adj2} symbol of the {place2} communities.",
            ]
        )
        doc_id = f"doc{i:03d}"
        docs.append(Document(doc_id=doc_id, text=text, title=f"{kw} overview"))
        train_q.append(
            QueryRecord(
                query_id=f"qtrain{i:03d}",
                query=_TRAIN_PHRASINGS[i % len(_TRAIN_PHRASINGS)].format(kw=kw),
                answer=kw,
                relevant_doc_ids=frozenset({doc_id}),
            )
        )
        heldout_q.append(
            QueryRecord(
                query_id=f"qeval{i:03d}",
                query=_HELDOUT_PHRASINGS[i % len(_HELDOUT_PHRASINGS)].format(kw=kw),
                answer=kw,
                relevant_doc_ids=frozenset({doc_id}),
            )
        )
    return Corpus(docs), train_q, heldout_q


def demo_experiment_kwargs() -> dict:
    """Experiment settings tuned for the synthetic dataset's demo run.

    Discriminating 100 keywords through the encoder bottleneck needs a wider
    embedding than the CLI default, and short eight-word identifier summaries
    keep the copy task crisp; with these the full train-plus-eval cycle stays
    around a minute on a laptop CPU.
    """
    return dict(
        k_pseudo=5,
        beam_size=10,
        m=8,
        model_fields={"embed_dim": 128, "hidden_dim": 256},
        pretrain_config=TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3, warmup_steps=30),
        finetune_config=TrainConfig(epochs=40, batch_size=16, learning_rate=1e-3, warmup_steps=30),
    )

"""Seeded synthetic text corpora with class-specific vocabularies."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Document, write_corpus

_ONSETS = "b c d f g h j k l m n p r s t v w z".split()
_VOWELS = "a e i o u".split()
SHARED_FRACTION = 0.25
SHARED_TOKEN_PROB = 0.3


def _make_words(n: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        n_syl = int(rng.integers(2, 5))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_documents(n_docs: int, n_classes: int, vocab: int = 600, seed: int = 0,
                   overlap: float = 0.0, min_len: int = 5, max_len: int = 20) -> list[Document]:
    """Generate ``n_docs`` documents over ``n_classes`` balanced labels.

    A quarter of the vocabulary is shared noise; the rest is split into
    disjoint per-class pools.  Each non-noise token comes from the document's
    own class pool with probability ``1 - overlap`` and from a uniformly
    random class pool otherwise, so ``overlap=0`` yields a linearly separable
    corpus.  The first token is always a class-pool token.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    if not 0 <= overlap <= 1:
        raise ValueError("overlap must lie in [0, 1]")
    n_shared = max(1, int(vocab * SHARED_FRACTION))
    per_class = (vocab - n_shared) // n_classes
    if per_class < 1:
        raise ValueError(f"vocab {vocab} too small for {n_classes} classes")

    rng = np.random.Generator(np.random.Philox(seed))
    words = _make_words(n_shared + per_class * n_classes, rng)
    shared = words[:n_shared]
    pools = [words[n_shared + c * per_class: n_shared + (c + 1) * per_class] for c in range(n_classes)]

    labels = np.arange(n_docs) % n_classes
    rng.shuffle(labels)
    width = len(str(max(n_docs - 1, 0)))
    docs = []
    for i, own in enumerate(labels):
        length = int(rng.integers(min_len, max_len + 1))
        tokens = []
        for t in range(length):
            if t > 0 and rng.random() < SHARED_TOKEN_PROB:
                tokens.append(shared[rng.integers(n_shared)])
                continue
            cls = own if rng.random() >= overlap else int(rng.integers(n_classes))
            pool = pools[cls]
            tokens.append(pool[rng.integers(len(pool))])
        docs.append(Document(id=f"doc{i:0{width}d}", text=" ".join(tokens), raw_label=f"class{own}"))
    return docs


def make_synthetic(out_path, n_docs: int, n_classes: int, vocab: int = 600, seed: int = 0,
                   overlap: float = 0.0) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out_path, make_documents(n_docs, n_classes, vocab, seed, overlap))
    return out_path

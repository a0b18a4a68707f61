"""Closed-vocabulary caption embedder for the synthetic shapes task.

Whitespace tokenization over a fixed word list; any unknown word maps to
the reserved <unk> row. Pooling is the token mean. The table is trainable;
it stands in for a pretrained text encoder at desk scale.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .nn import Embedding, Module
from .rng import Rng
from .tensor import Tensor, tmean

UNK = "<unk>"

DEFAULT_VOCAB = (
    UNK,
    "red", "green", "blue", "yellow",
    "square", "circle",
    "a", "scene", "with", "and", "shape", "shapes",
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "10",
)


def load_vocab(path: str | Path) -> tuple[str, ...]:
    words = [w.strip() for w in Path(path).read_text().splitlines() if w.strip()]
    if UNK not in words:
        words.insert(0, UNK)
    return tuple(words)


class ToyTextEmbedder(Module):
    def __init__(self, d_text: int, rng: Rng, vocab: tuple[str, ...] = DEFAULT_VOCAB):
        super().__init__()
        if vocab[0] != UNK:
            raise ValueError("vocabulary must reserve index 0 for <unk>")
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.d_text = d_text
        self.table = Embedding(len(vocab), d_text, rng.split("table"))

    def token_ids(self, text: str) -> np.ndarray:
        words = text.lower().split()
        if not words:
            raise ValueError("cannot embed an empty caption")
        return np.array([self.index.get(w, 0) for w in words], dtype=np.int64)

    def unconditional_ids(self) -> np.ndarray:
        """Single <unk> token, the text-masked condition."""
        return np.zeros(1, dtype=np.int64)

    def embed_tokens(self, text: str | None) -> Tensor:
        """[n_tokens, d_text]; None means the unconditional embedding."""
        ids = self.unconditional_ids() if text is None else self.token_ids(text)
        return self.table(ids)

    def embed_pooled(self, text: str | None) -> Tensor:
        return tmean(self.embed_tokens(text), axis=0)

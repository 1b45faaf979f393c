"""Toy text encoder: whitespace tokenizer, embedding table, mean pooling, and
frozen reference snapshots of the user prompt and undesired concepts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EMBED_DIM = 32
INIT_STD = 0.02
UNCOND = "<uncond>"
WITHOUT = "without"


class UnknownTokenError(KeyError):
    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError(f"duplicate tokens in vocabulary: {self.tokens}")
        if self.tokens.count(UNCOND) != 1:
            raise ValueError(f"vocabulary must contain {UNCOND!r} exactly once")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, bases: Sequence[str], attributes: Sequence[str]) -> "Vocabulary":
        return cls(tuple(bases) + tuple(attributes) + (WITHOUT, UNCOND))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise UnknownTokenError(
                f"unknown token {token!r}; vocabulary is {list(self.tokens)}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def tokenize(prompt: str, vocab: Vocabulary) -> list[int]:
    words = prompt.strip().lower().split()
    if not words:
        raise ValueError("empty prompt")
    return [vocab.id(w) for w in words]


class EmbeddingTable:
    def __init__(self, vocab: Vocabulary, matrix: np.ndarray, dtype=np.float32):
        if matrix.shape[0] != len(vocab):
            raise ValueError(f"table has {matrix.shape[0]} rows for a vocabulary of {len(vocab)}")
        self.vocab = vocab
        self.matrix = ad.param(matrix, dtype)

    @classmethod
    def init(cls, vocab: Vocabulary, seed: int, dim: int = EMBED_DIM) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        return cls(vocab, (rng.standard_normal((len(vocab), dim)) * INIT_STD).astype(np.float32))

    @property
    def dim(self) -> int:
        return self.matrix.data.shape[1]

    def params(self) -> list[Tensor]:
        return [self.matrix]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.vocab, self.matrix.data.copy(), self.matrix.data.dtype)


def encode(prompt: str, table: EmbeddingTable) -> Tensor:
    """Mean of the prompt's token rows, shape [d]."""
    ids = tokenize(prompt, table.vocab)
    return ad.mean(ad.index_rows(table.matrix, ids), axis=0)


def encode_value(prompt: str, table: EmbeddingTable) -> np.ndarray:
    """Same as :func:`encode` but never recorded on a graph."""
    ids = tokenize(prompt, table.vocab)
    rows = table.matrix.data[ids]
    return (rows.sum(axis=0, dtype=np.float64) / len(ids)).astype(table.matrix.data.dtype)


def pooling_matrix(prompts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    """[B, V] averaging weights; ``pool @ table`` encodes a batch of prompts."""
    pool = np.zeros((len(prompts), len(vocab)), dtype=np.float32)
    for i, p in enumerate(prompts):
        ids = tokenize(p, vocab)
        for j in ids:
            pool[i, j] += 1.0 / len(ids)
    return pool


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return ad.cosine_similarity(ad.const(a), ad.const(b)).item()


@dataclass(frozen=True)
class ConceptRefs:
    """Frozen pre-fine-tuning embeddings of the user prompt and each undesired
    concept, with their cosines."""
    user_prompt: str
    undesired: tuple[str, ...]
    v_i: np.ndarray
    v_m: tuple[np.ndarray, ...]
    ref_cosines: tuple[float, ...]

    def __post_init__(self):
        self.v_i.flags.writeable = False
        for v in self.v_m:
            v.flags.writeable = False

    def __eq__(self, other):
        if not isinstance(other, ConceptRefs):
            return NotImplemented
        return (self.user_prompt == other.user_prompt and self.undesired == other.undesired
                and self.ref_cosines == other.ref_cosines
                and np.array_equal(self.v_i, other.v_i)
                and len(self.v_m) == len(other.v_m)
                and all(np.array_equal(a, b) for a, b in zip(self.v_m, other.v_m)))

    __hash__ = None


def snapshot_refs(c_i: str, c_m: Sequence[str], table: EmbeddingTable) -> ConceptRefs:
    if not c_m:
        raise ValueError("at least one undesired concept is required")
    v_i = encode_value(c_i, table).copy()
    v_m = tuple(encode_value(c, table).copy() for c in c_m)
    return ConceptRefs(c_i.strip().lower(), tuple(c.strip().lower() for c in c_m), v_i, v_m,
                       tuple(_cos(v_i, v) for v in v_m))


def respecify_concepts(new_c_m: Sequence[str], table: EmbeddingTable, refs: ConceptRefs) -> ConceptRefs:
    """Swap the undesired concepts with one forward pass; v_i is kept."""
    if not new_c_m:
        raise ValueError("at least one undesired concept is required")
    v_m = tuple(encode_value(c, table).copy() for c in new_c_m)
    return ConceptRefs(refs.user_prompt, tuple(c.strip().lower() for c in new_c_m),
                       refs.v_i, v_m, tuple(_cos(refs.v_i, v) for v in v_m))

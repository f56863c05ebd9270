"""Toy sentence encoder and its two heads.

The encoder is an embedding lookup with mean pooling over a sentence's
tokens (pad excluded from the mean).  On top of it sit a two-layer MLP
projection head whose output rows are l2-normalized for the contrastive
loss, and a linear pair-classification head over (u, u', |u - u'|).

Mean pooling is expressed as a constant pooling-matrix matmul against the
embedding table, so the whole forward pass is differentiable through
:mod:`pairsupcon.diffcore`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, Value

PAD_ID = 0
UNK_ID = 1
NUM_SPECIAL = 2
PROJECTION_DIM = 128
ACTIVATIONS = ("relu", "identity")

_TOKEN_RE = re.compile(r"\w+")


def split_text(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; punctuation is dropped."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Token <-> id map with reserved pad=0 and unk=1."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    id_to_token: list[str] = field(default_factory=lambda: ["<pad>", "<unk>"])

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        vocab = cls()
        for token in tokens:
            if token in vocab.token_to_id:
                raise ValueError(f"duplicate vocabulary token {token!r}")
            vocab.token_to_id[token] = len(vocab.id_to_token)
            vocab.id_to_token.append(token)
        return vocab

    @classmethod
    def build(cls, texts, min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for token in split_text(text):
                counts[token] = counts.get(token, 0) + 1
        kept = sorted(t for t, c in counts.items() if c >= min_count)
        return cls.from_tokens(kept)

    def save(self, path) -> None:
        # one token per line; line number = id - 2 (pad/unk are implicit)
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token[NUM_SPECIAL:]:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_tokens(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids for a text; unknown tokens map to unk, empty text to [unk]."""
    tokens = split_text(text)
    if not tokens:
        return [UNK_ID]
    return [vocab.token_to_id.get(t, UNK_ID) for t in tokens]


@dataclass
class ModelParams:
    """Embedding table plus projection-head and classifier-head weights.

    Projection head: u (1xd) -> relu(u W1 + b1) W2 + b2, output width 128.
    Classifier head: concat(u, u', |u - u'|) (1x3d) -> logits (1x2).
    """

    embedding: np.ndarray   # V x d
    proj_w1: np.ndarray     # d x d
    proj_b1: np.ndarray     # 1 x d
    proj_w2: np.ndarray     # d x proj_dim
    proj_b2: np.ndarray     # 1 x proj_dim
    cls_w: np.ndarray       # 3d x 2
    cls_b: np.ndarray       # 1 x 2
    activation: str = "relu"

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def proj_dim(self) -> int:
        return self.proj_w2.shape[1]

    def named(self) -> list[tuple[str, np.ndarray]]:
        return [("embedding", self.embedding),
                ("proj_w1", self.proj_w1), ("proj_b1", self.proj_b1),
                ("proj_w2", self.proj_w2), ("proj_b2", self.proj_b2),
                ("cls_w", self.cls_w), ("cls_b", self.cls_b)]

    def replace(self, name: str, array: np.ndarray) -> "ModelParams":
        arrays = dict(self.named())
        if name not in arrays:
            raise ValueError(f"unknown parameter {name!r}")
        arrays[name] = array
        return ModelParams(activation=self.activation, **arrays)

    def copy(self) -> "ModelParams":
        arrays = {name: arr.copy() for name, arr in self.named()}
        return ModelParams(activation=self.activation, **arrays)

    def validate(self) -> None:
        d = self.dim
        expected = {
            "proj_w1": (d, d), "proj_b1": (1, d),
            "proj_w2": (d, self.proj_dim), "proj_b2": (1, self.proj_dim),
            "cls_w": (3 * d, 2), "cls_b": (1, 2),
        }
        for name, arr in self.named():
            if name in expected and arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def init_params(vocab_size: int, dim: int, seed, proj_dim: int = PROJECTION_DIM,
                activation: str = "relu") -> ModelParams:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per matrix.

    The embedding table uses fan_in = dim so token vectors share the scale
    of the head inputs.
    """
    rng = np.random.default_rng(seed)

    def uniform(rows, cols, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(rows, cols))

    params = ModelParams(
        embedding=uniform(vocab_size, dim, dim),
        proj_w1=uniform(dim, dim, dim),
        proj_b1=uniform(1, dim, dim),
        proj_w2=uniform(dim, proj_dim, dim),
        proj_b2=uniform(1, proj_dim, dim),
        cls_w=uniform(3 * dim, 2, 3 * dim),
        cls_b=uniform(1, 2, 3 * dim),
        activation=activation,
    )
    params.validate()
    return params


def pooling_matrix(token_batches, vocab_size: int) -> np.ndarray:
    """Constant n x V matrix whose row s averages sentence s's token rows."""
    pool = np.zeros((len(token_batches), vocab_size))
    for s, ids in enumerate(token_batches):
        valid = [i for i in ids if i != PAD_ID]
        for i in valid:
            if not 0 <= i < vocab_size:
                raise ValueError(f"token id {i} out of range for vocabulary of size {vocab_size}")
        if not valid:
            raise ValueError(f"sentence {s} has no non-pad tokens")
        weight = 1.0 / len(valid)
        for i in valid:
            pool[s, i] += weight
    return pool


@dataclass
class EncodedBatch:
    """Forward results for one pair batch: representations and projections.

    Row 2j holds pair j's premise, row 2j+1 its hypothesis; `pairs` is the
    paired-index map.  Rows of `z` are unit-norm by construction.
    """

    u: Value                          # 2M x d
    z: Value                          # 2M x proj_dim
    pairs: tuple[tuple[int, int], ...]


class ModelForward:
    """One differentiable forward pass; owns the graph and parameter leaves.

    Parameters are read-only during the pass, so a ModelParams instance can
    back any number of concurrent ModelForward objects.
    """

    def __init__(self, params: ModelParams, graph: Graph | None = None,
                 leaf_overrides: dict[str, Value] | None = None):
        params.validate()
        self.params = params
        overrides = leaf_overrides or {}
        self.graph = graph if graph is not None else Graph()
        self.leaves = {}
        for name, arr in params.named():
            if name in overrides:
                if overrides[name].graph is not self.graph:
                    raise ValueError(f"override for {name} lives in a different graph")
                self.leaves[name] = overrides[name]
            else:
                self.leaves[name] = self.graph.leaf(arr, requires_grad=True)

    def encode(self, token_batches) -> Value:
        """Mean-pooled sentence representations, one row per sentence."""
        pool = pooling_matrix(token_batches, self.params.vocab_size)
        return self.graph.leaf(pool) @ self.leaves["embedding"]

    def _activate(self, h: Value) -> Value:
        if self.params.activation == "relu":
            return (h + h.abs()).scale(0.5)
        return h

    def project(self, u: Value) -> Value:
        """Two-layer MLP head; output rows l2-normalized."""
        if u.shape[1] != self.params.dim:
            raise ValueError(f"expected width {self.params.dim}, got {u.shape[1]}")
        hidden = self._activate(u @ self.leaves["proj_w1"] + self.leaves["proj_b1"])
        return dc.row_l2_normalize(hidden @ self.leaves["proj_w2"] + self.leaves["proj_b2"])

    def classify_pair(self, u_i: Value, u_ip: Value) -> Value:
        """Logits (1x2) for one (premise, hypothesis) representation pair."""
        if u_i.shape != u_ip.shape:
            raise ValueError(f"length mismatch {u_i.shape} vs {u_ip.shape}")
        feats = dc.concat_cols([u_i, u_ip, (u_i - u_ip).abs()])
        return feats @ self.leaves["cls_w"] + self.leaves["cls_b"]

    def classify_pairs(self, u: Value) -> Value:
        """Logits (Mx2) for a 2M-row batch in interleaved premise/hyp layout."""
        n = u.shape[0]
        if n % 2:
            raise ValueError(f"pair batch needs an even number of rows, got {n}")
        m = n // 2
        sel_prem = np.zeros((m, n))
        sel_hyp = np.zeros((m, n))
        sel_prem[np.arange(m), 2 * np.arange(m)] = 1.0
        sel_hyp[np.arange(m), 2 * np.arange(m) + 1] = 1.0
        prem = self.graph.leaf(sel_prem) @ u
        hyp = self.graph.leaf(sel_hyp) @ u
        feats = dc.concat_cols([prem, hyp, (prem - hyp).abs()])
        return feats @ self.leaves["cls_w"] + self.leaves["cls_b"]

    def encode_pairs(self, token_batches) -> EncodedBatch:
        if len(token_batches) % 2:
            raise ValueError("pair batch needs an even number of sentences")
        u = self.encode(token_batches)
        z = self.project(u)
        pairs = tuple((2 * j, 2 * j + 1) for j in range(len(token_batches) // 2))
        return EncodedBatch(u=u, z=z, pairs=pairs)


def encode_corpus(texts, vocab: Vocabulary, params: ModelParams) -> np.ndarray:
    """Plain-numpy mean-pooled representations for frozen-parameter evaluation."""
    batches = [tokenize(t, vocab) for t in texts]
    return pooling_matrix(batches, params.vocab_size) @ params.embedding

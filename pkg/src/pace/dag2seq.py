"""DAG-to-sequence transformation.

Each canonical position ``j`` becomes ``(op_j, p_j)`` where ``p_j`` is the
output of a one-layer GIN-style message pass over one-hot canonical
indices::

    a_j = sum of one_hot(i) over canonical predecessors i of j
    p_j = mlp((1 + eps) * one_hot(j) + a_j)

:func:`exact_sequence` is the discrete counterpart (index, predecessor set,
op) used to check injectivity without a trained network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .canonize import CanonicalForm
from .errors import DimMismatch, TooManyNodes
from .tensor import Tensor, add, concat, feed_forward, index, linear, parameter, scale


class ExactSeqItem(NamedTuple):
    canon_index: int
    pred_set: tuple[int, ...]
    op: int


def exact_sequence(cf: CanonicalForm) -> list[ExactSeqItem]:
    preds = cf.predecessor_sets()
    return [ExactSeqItem(j, tuple(preds[j]), cf.canon_labels[j]) for j in range(cf.n)]


@dataclass
class PositionalEncoderParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    eps: Tensor

    @property
    def onehot_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def d_pe(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, onehot_dim: int, d_pe: int, rng: np.random.Generator) -> PositionalEncoderParams:
        if d_pe <= 0:
            raise ValueError("d_pe must be positive")
        b1 = 1.0 / math.sqrt(onehot_dim)
        b2 = 1.0 / math.sqrt(d_pe)
        return cls(
            w1=parameter(rng.uniform(-b1, b1, (onehot_dim, d_pe))),
            b1=parameter(np.zeros(d_pe)),
            w2=parameter(rng.uniform(-b2, b2, (d_pe, d_pe))),
            b2=parameter(np.zeros(d_pe)),
            eps=parameter(np.zeros(())),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2", "eps")}

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], prefix: str) -> PositionalEncoderParams:
        return cls(**{k: tensors[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2", "eps")})


def positional_inputs(
    n: int, preds: list[list[int]] | list[tuple[int, ...]], onehot_dim: int, offset: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """One-hot self indices and summed one-hot predecessor indices, both ``n x onehot_dim``.

    ``offset`` shifts every index, used by the decoder whose slot 0 is START.
    """
    if n + offset > onehot_dim:
        raise TooManyNodes(f"{n} nodes do not fit a one-hot width of {onehot_dim}")
    own = np.zeros((n, onehot_dim))
    agg = np.zeros((n, onehot_dim))
    for j in range(n):
        own[j, j + offset] = 1.0
        for i in preds[j]:
            agg[j, i + offset] += 1.0
    return own, agg


def pe_from_inputs(own: np.ndarray, agg: np.ndarray, params: PositionalEncoderParams) -> Tensor:
    """GIN combine and 2-layer perceptron; works on any leading batch shape."""
    onehot = scale(Tensor(own), add(params.eps, 1.0))
    x = add(onehot, Tensor(agg))
    h = feed_forward(x, params.w1, params.b1)
    return linear(h, params.w2, params.b2)


def positional_encodings(cf: CanonicalForm, params: PositionalEncoderParams) -> Tensor:
    if cf.n > params.onehot_dim:
        raise TooManyNodes(f"{cf.n} nodes exceed one-hot width {params.onehot_dim}")
    own, agg = positional_inputs(cf.n, cf.predecessor_sets(), params.onehot_dim)
    return pe_from_inputs(own, agg, params)


@dataclass
class SequenceEncoding:
    ops: list[int]
    pe: Tensor
    exact: list[ExactSeqItem]

    def __len__(self) -> int:
        return len(self.ops)


def dag2seq(cf: CanonicalForm, params: PositionalEncoderParams) -> SequenceEncoding:
    return SequenceEncoding(list(cf.canon_labels), positional_encodings(cf, params), exact_sequence(cf))


def embed_tokens(ops: np.ndarray, pe: Tensor, type_emb: Tensor, mode: str) -> Tensor:
    """Combine type embeddings of ``ops`` (any shape) with positional encodings ``ops.shape + (d_pe,)``."""
    emb = index(type_emb, np.asarray(ops, dtype=np.int64))
    if mode == "concat":
        return concat([emb, pe], axis=-1)
    if mode == "sum":
        if emb.shape != pe.shape:
            raise DimMismatch(f"sum mode needs equal widths, got {emb.shape[-1]} and {pe.shape[-1]}")
        return add(emb, pe)
    raise ValueError(f"unknown combine mode {mode!r}")


def embed_sequence(seq: SequenceEncoding, type_emb: Tensor, mode: str = "concat") -> Tensor:
    if mode == "concat" and seq.pe.shape[0] != len(seq.ops):
        raise DimMismatch("positional encodings and ops differ in length")
    return embed_tokens(np.asarray(seq.ops, dtype=np.int64), seq.pe, type_emb, mode)


def sinusoidal_encoding(positions: np.ndarray, width: int) -> np.ndarray:
    """Classic sine/cosine index encoding (positions only, no structure)."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(width)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / width)
    angles = pos * rates
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))

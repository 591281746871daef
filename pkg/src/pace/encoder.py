"""Stacked masked multi-head self-attention over dag2seq sequences."""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Sequence
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

import numpy as np

from .canonize import CanonicalForm, canonical_form
from .dag import LabeledDag, OperationDictionary, add_virtual_output, topological_order, validate
from .dag2seq import PositionalEncoderParams, embed_tokens, pe_from_inputs, positional_inputs, sinusoidal_encoding
from .errors import NoUniqueSink, ShapeMismatch, TooManyNodes
from .mask import MaskMatrix, mask_dfs, mask_floyd
from .tensor import (
    Tensor,
    add,
    concat,
    feed_forward,
    index,
    layer_norm,
    masked_softmax,
    matmul,
    parameter,
    reshape,
    scale,
    transpose,
)

ORDERINGS = ("canonical", "topological", "bfs")
# dag2seq: GIN encoding of canonical index + predecessors; sinusoidal: index only;
# adjacency: sequence-model baseline features (sinusoidal index + projected adjacency vector).
PE_MODES = ("dag2seq", "sinusoidal", "adjacency")


@dataclass(frozen=True)
class ModelConfig:
    K: int = 3
    h: int = 4
    d_t: int = 64
    d_pe: int = 64
    N: int = 16
    combine_mode: str = "concat"
    use_mask: bool = True
    attention_scale: str = "d"
    residual: bool = False
    layer_norm: bool = False
    pe_mode: str = "dag2seq"
    ordering: str = "canonical"
    mask_algo: str = "floyd"

    def __post_init__(self) -> None:
        if self.K < 1 or self.h < 1:
            raise ValueError("K and h must be positive")
        if self.combine_mode not in ("concat", "sum"):
            raise ValueError(f"combine_mode must be concat or sum, not {self.combine_mode!r}")
        if self.combine_mode == "sum" and self.d_t != self.d_pe:
            raise ValueError("sum mode needs d_t == d_pe")
        if self.d % self.h:
            raise ValueError(f"model width {self.d} not divisible by {self.h} heads")
        if self.attention_scale not in ("d", "sqrt"):
            raise ValueError("attention_scale must be 'd' or 'sqrt'")
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")
        if self.mask_algo not in ("floyd", "dfs"):
            raise ValueError("mask_algo must be 'floyd' or 'dfs'")

    @property
    def d(self) -> int:
        return self.d_t + self.d_pe if self.combine_mode == "concat" else self.d_t

    @property
    def scale_divisor(self) -> float:
        return float(self.d) if self.attention_scale == "d" else math.sqrt(self.d / self.h)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


@dataclass
class Prepared:
    """Per-DAG arrays the encoder consumes, padded to ``N`` slots."""

    form: CanonicalForm
    labels: np.ndarray
    own: np.ndarray
    agg: np.ndarray
    allowed: np.ndarray
    n_real: int
    sink: int
    adj: np.ndarray

    def with_labels(self, labels: np.ndarray) -> Prepared:
        return replace(self, labels=np.asarray(labels, dtype=np.int64))


def ordered_form(dag: LabeledDag, order: Sequence[int]) -> CanonicalForm:
    """A non-canonical form listing ``dag`` in the given node order (no certificate)."""
    perm = [0] * dag.n
    for pos, v in enumerate(order):
        perm[v] = pos
    return CanonicalForm(
        perm=tuple(perm),
        canon_edges=tuple(sorted((perm[u], perm[v]) for u, v in dag.edges)),
        canon_labels=tuple(dag.labels[v] for v in order),
        certificate=b"",
    )


def bfs_order(dag: LabeledDag) -> list[int]:
    succ = [sorted(s) for s in dag.successors()]
    seen = [False] * dag.n
    order: list[int] = []
    for src in dag.sources():
        if seen[src]:
            continue
        seen[src] = True
        queue = deque([src])
        while queue:
            u = queue.popleft()
            order.append(u)
            for v in succ[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
    return order


def form_for(dag: LabeledDag, ordering: str) -> CanonicalForm:
    if ordering == "canonical":
        return canonical_form(dag)
    if ordering == "topological":
        order = topological_order(dag)
        assert order is not None
        return ordered_form(dag, order)
    if ordering == "bfs":
        return ordered_form(dag, bfs_order(dag))
    raise ValueError(f"unknown ordering {ordering!r}")


def pad_sequence(form: CanonicalForm, config: ModelConfig, ops: OperationDictionary) -> Prepared:
    """Pad a (canonical) form to ``N`` slots with END symbols and build its attention mask.

    Padding slots carry the END type and the positional encoding of the
    reserved one-hot index ``N``.
    """
    N = config.N
    n = form.n
    if n > N:
        raise TooManyNodes(f"{n} nodes exceed N={N}")
    preds = form.predecessor_sets()
    own = np.zeros((N, N + 1))
    agg = np.zeros((N, N + 1))
    o, a = positional_inputs(n, preds, N + 1)
    own[:n], agg[:n] = o, a
    own[n:, N] = 1.0
    labels = np.full(N, ops.end, dtype=np.int64)
    labels[:n] = form.canon_labels
    build = mask_floyd if config.mask_algo == "floyd" else mask_dfs
    mask: MaskMatrix = build(form, N)
    sink = form.sink()
    adj = adjacency_features(form, N, relative=config.ordering == "bfs")
    return Prepared(form, labels, own, agg, mask.attention_allowed(), n, -1 if sink is None else sink, adj)


def adjacency_features(form: CanonicalForm, N: int, relative: bool) -> np.ndarray:
    """Per-position signed connections to earlier positions.

    Entry is +1 for an edge from the earlier position, -1 for an edge into it.
    Absolute layout indexes earlier positions directly (topological-order
    sequence models); relative layout indexes them by distance back from the
    current position (BFS-order sequence models).
    """
    adj = np.zeros((N, N))
    for u, v in form.canon_edges:
        t, s, sign = (v, u, 1.0) if u < v else (u, v, -1.0)
        adj[t, t - 1 - s if relative else s] = sign
    return adj


def prepare(dag: LabeledDag, config: ModelConfig, ops: OperationDictionary) -> Prepared:
    validate(dag, ops.output + 1)
    normalized = add_virtual_output(dag, ops.output)
    return pad_sequence(form_for(normalized, config.ordering), config, ops)


@dataclass
class Batch:
    labels: np.ndarray
    own: np.ndarray
    agg: np.ndarray
    allowed: np.ndarray
    sinks: np.ndarray
    adj: np.ndarray

    @classmethod
    def stack(cls, items: Sequence[Prepared]) -> Batch:
        return cls(
            labels=np.stack([p.labels for p in items]),
            own=np.stack([p.own for p in items]),
            agg=np.stack([p.agg for p in items]),
            allowed=np.stack([p.allowed for p in items]),
            sinks=np.array([p.sink for p in items], dtype=np.int64),
            adj=np.stack([p.adj for p in items]),
        )

    def __len__(self) -> int:
        return self.labels.shape[0]


def init_encoder_params(config: ModelConfig, ops: OperationDictionary, rng: np.random.Generator) -> dict[str, Tensor]:
    d, dh = config.d, config.d // config.h
    bound = 1.0 / math.sqrt(d)
    params: dict[str, Tensor] = {"type_emb": parameter(rng.normal(0.0, 0.02, (ops.vocab_size, config.d_t)))}
    params.update(PositionalEncoderParams.init(config.N + 1, config.d_pe, rng).named("pe"))
    if config.pe_mode == "adjacency":
        params["adj.w"] = parameter(rng.uniform(-1.0 / math.sqrt(config.N), 1.0 / math.sqrt(config.N), (config.N, config.d_pe)))
    for k in range(config.K):
        for j in range(config.h):
            for name in ("wq", "wk", "wv"):
                params[f"block{k}.head{j}.{name}"] = parameter(rng.uniform(-bound, bound, (d, dh)))
        params[f"block{k}.ff.w"] = parameter(rng.uniform(-bound, bound, (d, d)))
        params[f"block{k}.ff.b"] = parameter(np.zeros(d))
        if config.layer_norm:
            for ln in ("ln1", "ln2"):
                params[f"block{k}.{ln}.g"] = parameter(np.ones(d))
                params[f"block{k}.{ln}.b"] = parameter(np.zeros(d))
    return params


def attention(
    query_in: Tensor,
    kv_in: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    allowed: np.ndarray | None,
    divisor: float,
) -> Tensor:
    q = matmul(query_in, wq)
    k = matmul(kv_in, wk)
    v = matmul(kv_in, wv)
    scores = scale(matmul(q, transpose(k)), 1.0 / divisor)
    return matmul(masked_softmax(scores, allowed), v)


def multi_head(
    query_in: Tensor,
    kv_in: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
    allowed: np.ndarray | None,
    divisor: float,
) -> Tensor:
    outs = [
        attention(
            query_in,
            kv_in,
            params[f"{prefix}.head{j}.wq"],
            params[f"{prefix}.head{j}.wk"],
            params[f"{prefix}.head{j}.wv"],
            allowed,
            divisor,
        )
        for j in range(heads)
    ]
    return concat(outs, axis=-1) if len(outs) > 1 else outs[0]


def encoder_block(
    H: Tensor, allowed: np.ndarray | None, params: dict[str, Tensor], k: int, config: ModelConfig
) -> Tensor:
    """One block: heads of (masked) attention, concatenated, then the one-layer feed-forward."""
    if H.shape[-1] != config.d:
        raise ShapeMismatch(f"block input width {H.shape[-1]} != {config.d}")
    att = multi_head(H, H, params, f"block{k}", config.h, allowed if config.use_mask else None, config.scale_divisor)
    if config.residual:
        att = add(att, H)
    if config.layer_norm:
        att = layer_norm(att, params[f"block{k}.ln1.g"], params[f"block{k}.ln1.b"])
    out = feed_forward(att, params[f"block{k}.ff.w"], params[f"block{k}.ff.b"])
    if config.residual:
        out = add(out, att)
    if config.layer_norm:
        out = layer_norm(out, params[f"block{k}.ln2.g"], params[f"block{k}.ln2.b"])
    return out


def input_embeddings(batch: Batch, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    if config.pe_mode == "dag2seq":
        pe = pe_from_inputs(batch.own, batch.agg, PositionalEncoderParams.from_named(params, "pe"))
    else:
        table = sinusoidal_encoding(np.arange(config.N), config.d_pe)
        pe = Tensor(np.broadcast_to(table, (len(batch), config.N, config.d_pe)))
        if config.pe_mode == "adjacency":
            pe = add(pe, matmul(Tensor(batch.adj), params["adj.w"]))
    return embed_tokens(batch.labels, pe, params["type_emb"], config.combine_mode)


def forward(batch: Batch, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Encoder output of shape ``(B, N, d)``."""
    H = input_embeddings(batch, params, config)
    for k in range(config.K):
        H = encoder_block(H, batch.allowed, params, k, config)
    return H


def readout_output_node(embeddings: Tensor, sinks: np.ndarray | int) -> Tensor:
    """Row of the unique sink: ``(N, d) -> (d,)`` or ``(B, N, d) -> (B, d)``."""
    sinks_arr = np.atleast_1d(np.asarray(sinks, dtype=np.int64))
    if (sinks_arr < 0).any():
        raise NoUniqueSink("DAG has no unique sink")
    if embeddings.ndim == 2:
        return index(embeddings, int(sinks_arr[0]))
    return index(embeddings, (np.arange(embeddings.shape[0]), sinks_arr))


def readout_concat(embeddings: Tensor) -> Tensor:
    """Flatten all ``N`` rows in canonical order: ``(N, d) -> (N*d,)``, batched likewise."""
    if embeddings.ndim == 2:
        return reshape(embeddings, (-1,))
    return reshape(embeddings, (embeddings.shape[0], -1))


def readout(embeddings: Tensor, batch: Batch, kind: str) -> Tensor:
    if kind == "output":
        return readout_output_node(embeddings, batch.sinks)
    if kind == "concat":
        return readout_concat(embeddings)
    raise ValueError(f"unknown readout {kind!r}")


def readout_width(config: ModelConfig, kind: str) -> int:
    return config.d if kind == "output" else config.N * config.d


class PaceEncoder:
    """Convenience bundle of configuration, dictionary and parameters."""

    def __init__(
        self,
        config: ModelConfig,
        ops: OperationDictionary,
        params: dict[str, Tensor] | None = None,
        seed: int = 0,
    ) -> None:
        self.config = config
        self.ops = ops
        self.params = params if params is not None else init_encoder_params(config, ops, np.random.default_rng(seed))

    def prepare(self, dag: LabeledDag) -> Prepared:
        return prepare(dag, self.config, self.ops)

    def forward(self, items: Sequence[Prepared]) -> Tensor:
        return forward(Batch.stack(items), self.params, self.config)

    def encode(self, dag: LabeledDag) -> Tensor:
        """``N x d`` embeddings of one DAG."""
        out = self.forward([self.prepare(dag)])
        return index(out, 0)

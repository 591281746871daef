"""Variational autoencoder: the encoder's concat readout feeds Gaussian heads, and a
Transformer decoder rebuilds the DAG node by node in canonical order.

Decoder sequence layout for an ``n``-node target: position 0 is START,
position ``t >= 1`` carries node ``t - 1``. Output ``o_t`` predicts the type
of node ``t`` (STOP when ``t == n``) and, together with ``o_s`` for ``s < t``,
the existence of edge ``s -> t``.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint
from .canonize import CanonicalForm, canonical_form
from .dag import LabeledDag, OperationDictionary, is_valid
from .dag2seq import PositionalEncoderParams, embed_tokens, pe_from_inputs
from .encoder import Batch, ModelConfig, Prepared, forward, init_encoder_params, multi_head, prepare, readout_concat
from .errors import NonFinite, ShapeMismatch, TooManyNodes
from .mask import reach_dfs
from .optim import Adam
from .tensor import (
    Tape,
    Tensor,
    add,
    binary_cross_entropy,
    concat,
    cross_entropy,
    exp,
    feed_forward,
    gaussian_kl,
    index,
    layer_norm,
    linear,
    mul,
    parameter,
    reshape,
    scale,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VaeConfig:
    d_z: int = 56
    d_k: int = 64
    K: int = 3
    h: int = 4
    beta: float = 1.0
    kl_warmup: float = 0.1
    decoder_mask: str = "causal"
    # decoder blocks are standard post-norm Transformer blocks by default
    residual: bool = True
    layer_norm: bool = True
    attention_scale: str = "sqrt"

    def __post_init__(self) -> None:
        if self.d_k % 2 or (self.d_k % self.h):
            raise ValueError("d_k must be even and divisible by h")
        if self.decoder_mask not in ("causal", "reachability"):
            raise ValueError("decoder_mask must be 'causal' or 'reachability'")
        if self.attention_scale not in ("d", "sqrt"):
            raise ValueError("attention_scale must be 'd' or 'sqrt'")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> VaeConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


def init_vae_params(
    enc: ModelConfig, vae: VaeConfig, ops: OperationDictionary, rng: np.random.Generator
) -> dict[str, Tensor]:
    params = init_encoder_params(enc, ops, rng)
    width = enc.N * enc.d
    b = 1.0 / math.sqrt(width)
    for head in ("mean", "logvar"):
        params[f"vae.{head}.w"] = parameter(rng.uniform(-b, b, (width, vae.d_z)))
        params[f"vae.{head}.b"] = parameter(np.zeros(vae.d_z))
    dk, half, N = vae.d_k, vae.d_k // 2, enc.N
    bz, bk = 1.0 / math.sqrt(vae.d_z), 1.0 / math.sqrt(dk)
    params["dec.mem.w"] = parameter(rng.uniform(-bz, bz, (vae.d_z, N * dk)))
    params["dec.mem.b"] = parameter(np.zeros(N * dk))
    # decoder vocabulary: user ops then START
    params["dec.type_emb"] = parameter(rng.normal(0.0, 0.02, (len(ops) + 1, half)))
    params.update(PositionalEncoderParams.init(N + 1, half, rng).named("dec.pe"))
    for k in range(vae.K):
        for part in ("self", "cross"):
            for j in range(vae.h):
                for name in ("wq", "wk", "wv"):
                    params[f"dec.block{k}.{part}.head{j}.{name}"] = parameter(rng.uniform(-bk, bk, (dk, dk // vae.h)))
        params[f"dec.block{k}.ff.w"] = parameter(rng.uniform(-bk, bk, (dk, dk)))
        params[f"dec.block{k}.ff.b"] = parameter(np.zeros(dk))
        if vae.layer_norm:
            for ln in ("ln1", "ln2", "ln3"):
                params[f"dec.block{k}.{ln}.g"] = parameter(np.ones(dk))
                params[f"dec.block{k}.{ln}.b"] = parameter(np.zeros(dk))
    b2 = 1.0 / math.sqrt(2 * dk)
    params["dec.type.w1"] = parameter(rng.uniform(-bk, bk, (dk, dk)))
    params["dec.type.b1"] = parameter(np.zeros(dk))
    params["dec.type.w2"] = parameter(rng.uniform(-bk, bk, (dk, len(ops) + 1)))
    params["dec.type.b2"] = parameter(np.zeros(len(ops) + 1))
    params["dec.edge.w1"] = parameter(rng.uniform(-b2, b2, (2 * dk, dk)))
    params["dec.edge.b1"] = parameter(np.zeros(dk))
    params["dec.edge.w2"] = parameter(rng.uniform(-bk, bk, (dk, 1)))
    params["dec.edge.b2"] = parameter(np.zeros(1))
    return params


def vae_encode(batch: Batch, params: dict[str, Tensor], enc: ModelConfig) -> tuple[Tensor, Tensor]:
    """Posterior mean and log-variance from the concat readout."""
    flat = readout_concat(forward(batch, params, enc))
    return (
        linear(flat, params["vae.mean.w"], params["vae.mean.b"]),
        linear(flat, params["vae.logvar.w"], params["vae.logvar.b"]),
    )


def reparameterize(mean: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """``mean + exp(logvar / 2) * noise`` with ``noise`` drawn from N(0, I) by the caller."""
    return add(mean, mul(exp(scale(logvar, 0.5)), Tensor(noise)))


@dataclass
class DecoderInputs:
    """Teacher-forcing (or partial-generation) inputs padded to ``N + 1`` positions."""

    types: np.ndarray
    own: np.ndarray
    agg: np.ndarray
    allowed: np.ndarray


def decoder_inputs(
    node_types: Sequence[Sequence[int]],
    preds: Sequence[Sequence[Sequence[int]]],
    N: int,
    start_type: int,
    mask_kind: str = "causal",
) -> DecoderInputs:
    """START followed by the given nodes; node ``t`` sits at position ``t + 1``."""
    B, L = len(node_types), N + 1
    types = np.full((B, L), start_type, dtype=np.int64)
    own = np.zeros((B, L, N + 1))
    agg = np.zeros((B, L, N + 1))
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = np.broadcast_to(causal, (B, L, L)).copy()
    own[:, 0, 0] = 1.0
    for b, (ts, ps) in enumerate(zip(node_types, preds)):
        n = len(ts)
        if n > N:
            raise TooManyNodes(f"{n} nodes exceed N={N}")
        for t in range(n):
            types[b, t + 1] = ts[t]
            own[b, t + 1, t + 1] = 1.0
            for s in ps[t]:
                agg[b, t + 1, s + 1] += 1.0
        if mask_kind == "reachability" and n:
            edges = [(s, t) for t in range(n) for s in ps[t]]
            reach = reach_dfs(n, edges)
            sub = np.zeros((L, L), dtype=bool)
            sub[:, 0] = True
            np.fill_diagonal(sub, True)
            sub[1 : n + 1, 1 : n + 1] |= reach.T
            allowed[b] &= sub
    return DecoderInputs(types, own, agg, allowed)


def _decoder_block(X: Tensor, memory: Tensor, allowed: np.ndarray, params: dict[str, Tensor], k: int, vae: VaeConfig) -> Tensor:
    divisor = float(vae.d_k) if vae.attention_scale == "d" else math.sqrt(vae.d_k / vae.h)
    pre = f"dec.block{k}"
    att = multi_head(X, X, params, f"{pre}.self", vae.h, allowed, divisor)
    if vae.residual:
        att = add(att, X)
    if vae.layer_norm:
        att = layer_norm(att, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    cross = multi_head(att, memory, params, f"{pre}.cross", vae.h, None, divisor)
    if vae.residual:
        cross = add(cross, att)
    if vae.layer_norm:
        cross = layer_norm(cross, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    out = feed_forward(cross, params[f"{pre}.ff.w"], params[f"{pre}.ff.b"])
    if vae.residual:
        out = add(out, cross)
    if vae.layer_norm:
        out = layer_norm(out, params[f"{pre}.ln3.g"], params[f"{pre}.ln3.b"])
    return out


def decode_states(z: Tensor, inputs: DecoderInputs, params: dict[str, Tensor], enc: ModelConfig, vae: VaeConfig) -> Tensor:
    """Decoder outputs ``(B, N + 1, d_k)`` for latent codes ``z`` of shape ``(B, d_z)``."""
    B = z.shape[0]
    memory = reshape(linear(z, params["dec.mem.w"], params["dec.mem.b"]), (B, enc.N, vae.d_k))
    pe = pe_from_inputs(inputs.own, inputs.agg, PositionalEncoderParams.from_named(params, "dec.pe"))
    X = embed_tokens(inputs.types, pe, params["dec.type_emb"], "concat")
    for k in range(vae.K):
        X = _decoder_block(X, memory, inputs.allowed, params, k, vae)
    return X


def type_logits(states: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = feed_forward(states, params["dec.type.w1"], params["dec.type.b1"])
    return linear(h, params["dec.type.w2"], params["dec.type.b2"])


def edge_logits(src_states: Tensor, dst_states: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = feed_forward(concat([src_states, dst_states], axis=-1), params["dec.edge.w1"], params["dec.edge.b1"])
    return reshape(linear(h, params["dec.edge.w2"], params["dec.edge.b2"]), (-1,))


@dataclass
class TeacherForced:
    type_logits: Tensor
    type_targets: np.ndarray
    edge_logits: Tensor
    edge_targets: np.ndarray
    type_owner: np.ndarray
    edge_owner: np.ndarray


def decode_teacher_forced(
    z: Tensor, targets: Sequence[CanonicalForm], params: dict[str, Tensor], enc: ModelConfig, vae: VaeConfig, ops: OperationDictionary
) -> TeacherForced:
    """Logits for every type step (including the final STOP) and every ``s < t`` edge pair."""
    if z.ndim != 2 or z.shape[0] != len(targets):
        raise ShapeMismatch(f"latent batch {z.shape} vs {len(targets)} targets")
    stop = len(ops)
    types = [list(cf.canon_labels) for cf in targets]
    preds = [cf.predecessor_sets() for cf in targets]
    inputs = decoder_inputs(types, preds, enc.N, stop, vae.decoder_mask)
    states = decode_states(z, inputs, params, enc, vae)
    tb, tt, ty = [], [], []
    eb, es, et, ey = [], [], [], []
    for b, cf in enumerate(targets):
        n = cf.n
        edge_set = set(cf.canon_edges)
        for t in range(n + 1):
            tb.append(b)
            tt.append(t)
            ty.append(cf.canon_labels[t] if t < n else stop)
        for t in range(1, n):
            for s in range(t):
                eb.append(b)
                es.append(s)
                et.append(t)
                ey.append(1.0 if (s, t) in edge_set else 0.0)
    tlog = type_logits(index(states, (np.array(tb), np.array(tt))), params)
    if eb:
        eb_a = np.array(eb)
        elog = edge_logits(index(states, (eb_a, np.array(es))), index(states, (eb_a, np.array(et))), params)
    else:
        elog = Tensor(np.zeros(0))
    return TeacherForced(tlog, np.array(ty), elog, np.array(ey), np.array(tb), np.array(eb, dtype=np.int64))


def reconstruction_loss(tf: TeacherForced) -> Tensor:
    """Summed type cross-entropies plus summed edge binary cross-entropies."""
    loss = cross_entropy(tf.type_logits, tf.type_targets, reduction="sum")
    if tf.edge_targets.size:
        loss = add(loss, binary_cross_entropy(tf.edge_logits, tf.edge_targets, reduction="sum"))
    return loss


@dataclass
class VaeModel:
    enc: ModelConfig
    vae: VaeConfig
    ops: OperationDictionary
    params: dict[str, Tensor]

    @classmethod
    def create(cls, enc: ModelConfig, vae: VaeConfig, ops: OperationDictionary, seed: int) -> VaeModel:
        return cls(enc, vae, ops, init_vae_params(enc, vae, ops, np.random.default_rng(seed)))

    def save(self, path: str | Path, extra: dict[str, Any] | None = None) -> None:
        meta = {"kind": "vae", "model": self.enc.to_dict(), "vae": self.vae.to_dict(), "ops": list(self.ops.ops)}
        meta.update(extra or {})
        checkpoint.save(path, {k: v.data for k, v in self.params.items()}, meta)

    @classmethod
    def load(cls, path: str | Path) -> VaeModel:
        arrays, meta = checkpoint.load(path)
        if meta is None or meta.get("kind") != "vae":
            raise ValueError(f"{path} is not a VAE checkpoint")
        return cls(
            ModelConfig.from_dict(meta["model"]),
            VaeConfig.from_dict(meta["vae"]),
            OperationDictionary(tuple(meta["ops"])),
            {k: parameter(v) for k, v in arrays.items()},
        )


@dataclass
class VaeExample:
    prepared: Prepared
    target: CanonicalForm


def vae_example(dag: LabeledDag, model: VaeModel) -> VaeExample:
    if dag.n > model.enc.N:
        raise TooManyNodes(f"{dag.n} nodes exceed N={model.enc.N}")
    return VaeExample(prepare(dag, model.enc, model.ops), canonical_form(dag))


def elbo_terms(
    examples: Sequence[VaeExample], model: VaeModel, noise: np.ndarray | None
) -> tuple[Tensor, Tensor, TeacherForced]:
    """Per-batch mean reconstruction loss and mean KL; ``noise=None`` decodes the posterior mean."""
    batch = Batch.stack([e.prepared for e in examples])
    mean, logvar = vae_encode(batch, model.params, model.enc)
    z = mean if noise is None else reparameterize(mean, logvar, noise)
    tf = decode_teacher_forced(z, [e.target for e in examples], model.params, model.enc, model.vae, model.ops)
    B = len(examples)
    return scale(reconstruction_loss(tf), 1.0 / B), scale(gaussian_kl(mean, logvar), 1.0 / B), tf


def elbo_loss(dag: LabeledDag, model: VaeModel, beta: float, noise: np.ndarray | None = None) -> Tensor:
    recon, kl, _ = elbo_terms([vae_example(dag, model)], model, noise)
    return add(recon, scale(kl, beta)) if beta else recon


@dataclass
class Generated:
    dag: LabeledDag
    stopped: bool
    fallback: bool


def generate_batch(z: np.ndarray, model: VaeModel, max_steps: int | None = None) -> list[Generated]:
    """Greedy decoding of a batch of latent codes."""
    enc, vae, ops, params = model.enc, model.vae, model.ops, model.params
    cap = enc.N if max_steps is None else min(max_steps, enc.N)
    stop = len(ops)
    B = z.shape[0]
    zt = Tensor(z)
    types: list[list[int]] = [[] for _ in range(B)]
    preds: list[list[list[int]]] = [[] for _ in range(B)]
    done = [False] * B
    stopped = [False] * B
    first_type = [0] * B
    for t in range(cap + 1):
        active = [b for b in range(B) if not done[b]]
        if not active:
            break
        inputs = decoder_inputs([types[b] for b in active], [preds[b] for b in active], enc.N, stop, vae.decoder_mask)
        states = decode_states(Tensor(zt.data[active]), inputs, params, enc, vae)
        logits = type_logits(index(states, (slice(None), t)), params).data
        if t == 0:
            for i, b in enumerate(active):
                first_type[b] = int(np.argmax(logits[i, :stop]))
        if t > 0:
            rows = np.repeat(np.arange(len(active)), t)
            src = np.tile(np.arange(t), len(active))
            elog = edge_logits(
                index(states, (rows, src)), index(states, (rows, np.full_like(src, t))), params
            ).data.reshape(len(active), t)
        for i, b in enumerate(active):
            choice = int(np.argmax(logits[i]))
            if choice == stop:
                done[b] = stopped[b] = True
                continue
            if t == cap:
                done[b] = True
                continue
            types[b].append(choice)
            preds[b].append([s for s in range(t) if elog[i, s] > 0.0] if t > 0 else [])
    out = []
    for b in range(B):
        n = len(types[b])
        if n == 0:
            out.append(Generated(LabeledDag(1, (), (first_type[b],)), stopped[b], True))
            continue
        edges = tuple((s, t) for t in range(n) for s in preds[b][t])
        out.append(Generated(LabeledDag(n, edges, tuple(types[b])), stopped[b], False))
    return out


def generate(z: np.ndarray, model: VaeModel, max_steps: int | None = None) -> LabeledDag:
    return generate_batch(np.atleast_2d(z), model, max_steps)[0].dag


def posterior_means(dags: Sequence[LabeledDag], model: VaeModel, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(dags), batch_size):
        batch = Batch.stack([prepare(d, model.enc, model.ops) for d in dags[start : start + batch_size]])
        out.append(vae_encode(batch, model.params, model.enc)[0].data)
    return np.concatenate(out)


def _decode_all(z: np.ndarray, model: VaeModel, batch_size: int = 128) -> list[Generated]:
    out: list[Generated] = []
    for start in range(0, len(z), batch_size):
        out.extend(generate_batch(z[start : start + batch_size], model))
    return out


def generation_metrics(
    model: VaeModel, train: Sequence[LabeledDag], n_samples: int, seed: int, recon_subset: int | None = None
) -> dict[str, float]:
    """Reconstruction accuracy, prior validity, uniqueness and novelty, all in [0, 1].

    A prior sample is valid when decoding terminated with STOP (no empty
    fallback, no step cap) and the graph passes DAG validation with labels in
    the user dictionary.
    """
    subset = list(train if recon_subset is None else train[:recon_subset])
    recon = _decode_all(posterior_means(subset, model), model)
    hits = sum(canonical_form(g.dag).certificate == canonical_form(d).certificate for g, d in zip(recon, subset))
    rng = np.random.default_rng(seed)
    samples = _decode_all(rng.standard_normal((n_samples, model.vae.d_z)), model)
    valid = [g.dag for g in samples if g.stopped and not g.fallback and is_valid(g.dag, len(model.ops))]
    train_certs = {canonical_form(d).certificate for d in train}
    certs = [canonical_form(d).certificate for d in valid]
    return {
        "recon_acc": hits / len(subset) if subset else 0.0,
        "valid": len(valid) / n_samples if n_samples else 0.0,
        "unique": len(set(certs)) / len(valid) if valid else 0.0,
        "novel": sum(c not in train_certs for c in certs) / len(valid) if valid else 0.0,
        "acyclic": sum(is_valid(g.dag) for g in samples) / n_samples if n_samples else 1.0,
    }


def train_vae(
    dags: Sequence[LabeledDag],
    model: VaeModel,
    epochs: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[dict[str, Any]], None] | None = None,
) -> tuple[list[dict[str, Any]], list[float]]:
    """ELBO training with an optional linear KL warm-up over the first ``kl_warmup`` share of steps."""
    rng = np.random.default_rng(seed)
    examples = [vae_example(d, model) for d in dags]
    opt = Adam(model.params.values(), lr=lr)
    steps_per_epoch = math.ceil(len(examples) / batch_size)
    warm = max(1, int(model.vae.kl_warmup * epochs * steps_per_epoch)) if model.vae.kl_warmup > 0 else 0
    out = Path(out_dir) if out_dir is not None else None
    metrics: list[dict[str, Any]] = []
    timings: list[float] = []
    step = 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        tot_r = tot_kl = 0.0
        order = rng.permutation(len(examples))
        for bid, start in enumerate(range(0, len(examples), batch_size)):
            chunk = [examples[i] for i in order[start : start + batch_size]]
            beta = model.vae.beta * (min(1.0, step / warm) if warm else 1.0)
            noise = rng.standard_normal((len(chunk), model.vae.d_z))
            with Tape() as tape:
                try:
                    recon, kl, _ = elbo_terms(chunk, model, noise)
                    loss = add(recon, scale(kl, beta)) if beta else recon
                    tape.backward(loss)
                    opt.step()
                except NonFinite as exc:
                    raise NonFinite(f"epoch {epoch} batch {bid}: {exc}") from None
            for p in model.params.values():
                p.grad = None
            tot_r += recon.item() * len(chunk)
            tot_kl += kl.item() * len(chunk)
            step += 1
        record = {"epoch": epoch, "recon": tot_r / len(examples), "kl": tot_kl / len(examples), "beta": beta}
        record["loss"] = record["recon"] + model.vae.beta * record["kl"]
        metrics.append(record)
        timings.append(time.perf_counter() - t0)
        log.info("vae epoch %d recon %.4f kl %.4f", epoch, record["recon"], record["kl"])
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            model.save(out / f"epoch{epoch:03d}.pact")
        if on_epoch is not None:
            on_epoch(record)
    return metrics, timings

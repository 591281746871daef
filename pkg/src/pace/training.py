"""Masked-operation pre-training and supervised regression on top of the encoder."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint
from .dag import DagSample, LabeledDag, OperationDictionary
from .encoder import Batch, ModelConfig, Prepared, forward, init_encoder_params, prepare, readout, readout_width
from .errors import DegenerateTargets, NonFinite
from .optim import Adam
from .tensor import Tape, Tensor, cross_entropy, index, linear, mse, parameter, reshape

log = logging.getLogger(__name__)

MASK_RATE = 0.2
REPLACE_RATE = 0.8


@dataclass(frozen=True)
class MlmBatchItem:
    dag: LabeledDag
    selected: tuple[int, ...]
    corrupted_labels: tuple[int, ...]
    targets: tuple[int, ...]


def mlm_selection_count(n: int) -> int:
    return max(1, round(MASK_RATE * n))


def mlm_corrupt(dag: LabeledDag, rng: np.random.Generator, mask_label: int) -> MlmBatchItem:
    """Pick ~20% of nodes; each becomes MASK with probability 0.8, else keeps its label."""
    k = min(dag.n, mlm_selection_count(dag.n))
    selected = tuple(sorted(int(v) for v in rng.choice(dag.n, size=k, replace=False)))
    labels = list(dag.labels)
    flips = rng.random(k) < REPLACE_RATE
    for v, flip in zip(selected, flips):
        if flip:
            labels[v] = mask_label
    return MlmBatchItem(dag, selected, tuple(labels), tuple(dag.labels[v] for v in selected))


def init_mlm_params(config: ModelConfig, ops: OperationDictionary, rng: np.random.Generator) -> dict[str, Tensor]:
    params = init_encoder_params(config, ops, rng)
    bound = 1.0 / math.sqrt(config.d)
    params["mlm.w"] = parameter(rng.uniform(-bound, bound, (config.d, len(ops))))
    params["mlm.b"] = parameter(np.zeros(len(ops)))
    return params


def _corrupted_batch(prepared: Sequence[Prepared], items: Sequence[MlmBatchItem]) -> tuple[Batch, np.ndarray, np.ndarray, np.ndarray]:
    relabeled = []
    rows_b, rows_p, targets = [], [], []
    for b, (prep, item) in enumerate(zip(prepared, items)):
        labels = prep.labels.copy()
        for v in range(item.dag.n):
            labels[prep.form.perm[v]] = item.corrupted_labels[v]
        relabeled.append(prep.with_labels(labels))
        for v, t in zip(item.selected, item.targets):
            rows_b.append(b)
            rows_p.append(prep.form.perm[v])
            targets.append(t)
    return Batch.stack(relabeled), np.array(rows_b), np.array(rows_p), np.array(targets)


def mlm_logits(prepared: Sequence[Prepared], items: Sequence[MlmBatchItem], params: dict[str, Tensor], config: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Logits over user operations for every selected node in the batch, and their targets.

    Corruption is applied at the canonical positions of the uncorrupted DAG,
    so structure and ordering are those of the original graph.
    """
    batch, rows_b, rows_p, targets = _corrupted_batch(prepared, items)
    H = forward(batch, params, config)
    picked = index(H, (rows_b, rows_p))
    return linear(picked, params["mlm.w"], params["mlm.b"]), targets


def mlm_loss(
    item: MlmBatchItem, params: dict[str, Tensor], config: ModelConfig, ops: OperationDictionary
) -> Tensor:
    logits, targets = mlm_logits([prepare(item.dag, config, ops)], [item], params, config)
    return cross_entropy(logits, targets)


def param_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: parameter(v) for k, v in arrays.items()}


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    metrics: list[dict[str, Any]] = field(default_factory=list)
    final: dict[str, Any] = field(default_factory=dict)
    timings: list[float] = field(default_factory=list)


def _minibatches(count: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def _save_epoch(out_dir: Path | None, name: str, params: dict[str, Tensor], meta: dict[str, Any]) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out_dir / name, param_arrays(params), meta)


def train_mlm(
    dags: Sequence[LabeledDag],
    config: ModelConfig,
    ops: OperationDictionary,
    epochs: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    out_dir: str | Path | None = None,
    prepared: Sequence[Prepared] | None = None,
    params: dict[str, Tensor] | None = None,
    on_epoch: Callable[[dict[str, Any]], None] | None = None,
    max_steps: int | None = None,
    stop_when: Callable[[dict[str, Any]], bool] | None = None,
) -> TrainResult:
    """Masked-node pre-training; ``stop_when`` ends training early after any epoch."""
    if not dags:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    params = params if params is not None else init_mlm_params(config, ops, rng)
    prepared = list(prepared) if prepared is not None else [prepare(d, config, ops) for d in dags]
    opt = Adam(params.values(), lr=lr)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(params)
    steps = 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        total, correct, count = 0.0, 0, 0
        for bid, idx in enumerate(_minibatches(len(dags), batch_size, rng)):
            items = [mlm_corrupt(dags[i], rng, ops.mask) for i in idx]
            with Tape() as tape:
                try:
                    logits, targets = mlm_logits([prepared[i] for i in idx], items, params, config)
                    loss = cross_entropy(logits, targets)
                    tape.backward(loss)
                    opt.step()
                except NonFinite as exc:
                    raise NonFinite(f"epoch {epoch} batch {bid}: {exc}") from None
            m = len(targets)
            total += loss.item() * m
            correct += int((logits.data.argmax(axis=1) == targets).sum())
            count += m
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        record = {"epoch": epoch, "loss": total / count, "acc": correct / count}
        result.metrics.append(record)
        result.timings.append(time.perf_counter() - t0)
        log.info("mlm epoch %d loss %.4f acc %.4f", epoch, record["loss"], record["acc"])
        _save_epoch(out, f"epoch{epoch:03d}.pact", params, {"kind": "mlm", "model": config.to_dict(), "ops": list(ops.ops)})
        if on_epoch is not None:
            on_epoch(record)
        if max_steps is not None and steps >= max_steps:
            break
        if stop_when is not None and stop_when(record):
            break
    result.final = dict(result.metrics[-1])
    return result


def mlm_accuracy(
    dags: Sequence[LabeledDag],
    params: dict[str, Tensor],
    config: ModelConfig,
    ops: OperationDictionary,
    seed: int,
    prepared: Sequence[Prepared] | None = None,
    batch_size: int = 64,
) -> float:
    """Masked-node accuracy on freshly corrupted copies of ``dags``."""
    rng = np.random.default_rng(seed)
    prepared = list(prepared) if prepared is not None else [prepare(d, config, ops) for d in dags]
    correct = count = 0
    for start in range(0, len(dags), batch_size):
        idx = range(start, min(start + batch_size, len(dags)))
        items = [mlm_corrupt(dags[i], rng, ops.mask) for i in idx]
        logits, targets = mlm_logits([prepared[i] for i in idx], items, params, config)
        correct += int((logits.data.argmax(axis=1) == targets).sum())
        count += len(targets)
    return correct / count


def pearson(pred: np.ndarray, target: np.ndarray) -> float:
    """Sample correlation coefficient; raises ``DegenerateTargets`` on zero variance."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(pred) < 2:
        raise DegenerateTargets("need at least two points")
    sp, st = pred.std(ddof=1), target.std(ddof=1)
    if st == 0.0:
        raise DegenerateTargets("targets have zero variance")
    if sp == 0.0:
        raise DegenerateTargets("predictions have zero variance")
    cov = ((pred - pred.mean()) * (target - target.mean())).sum() / (len(pred) - 1)
    return float(cov / (sp * st))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(diff**2)))


def split_indices(count: int, seed: int, test_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seeded uniform shuffle; the last ``test_fraction`` (at least one item) is held out."""
    order = np.random.default_rng(seed).permutation(count)
    n_test = max(1, int(round(test_fraction * count)))
    return order[: count - n_test], order[count - n_test :]


def init_regression_params(
    config: ModelConfig, ops: OperationDictionary, kind: str, rng: np.random.Generator
) -> dict[str, Tensor]:
    params = init_encoder_params(config, ops, rng)
    width = readout_width(config, kind)
    bound = 1.0 / math.sqrt(width)
    params["reg.w"] = parameter(rng.uniform(-bound, bound, (width, 1)))
    params["reg.b"] = parameter(np.zeros(1))
    return params


def regression_predict(batch: Batch, params: dict[str, Tensor], config: ModelConfig, kind: str) -> Tensor:
    H = forward(batch, params, config)
    return reshape(linear(readout(H, batch, kind), params["reg.w"], params["reg.b"]), (-1,))


def predict(
    prepared: Sequence[Prepared], params: dict[str, Tensor], config: ModelConfig, kind: str, batch_size: int = 128
) -> np.ndarray:
    outs = []
    for start in range(0, len(prepared), batch_size):
        outs.append(regression_predict(Batch.stack(prepared[start : start + batch_size]), params, config, kind).data)
    return np.concatenate(outs) if outs else np.zeros(0)


def train_regressor(
    samples: Sequence[DagSample],
    config: ModelConfig,
    ops: OperationDictionary,
    kind: str,
    epochs: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    freeze_encoder: bool = False,
    out_dir: str | Path | None = None,
    prepared: Sequence[Prepared] | None = None,
    params: dict[str, Tensor] | None = None,
    split_seed: int | None = None,
    on_epoch: Callable[[dict[str, Any]], None] | None = None,
) -> TrainResult:
    """MSE training of encoder + linear head; held-out RMSE and Pearson r after every epoch."""
    targets = np.array([s.target for s in samples], dtype=np.float64)
    if np.isnan(targets).any():
        raise ValueError("every sample needs a target")
    train_idx, test_idx = split_indices(len(samples), seed if split_seed is None else split_seed)
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_regression_params(config, ops, kind, rng)
    elif "reg.w" not in params:
        # pre-trained encoder: attach a fresh linear head
        width = readout_width(config, kind)
        bound = 1.0 / math.sqrt(width)
        params = dict(params)
        params["reg.w"] = parameter(rng.uniform(-bound, bound, (width, 1)))
        params["reg.b"] = parameter(np.zeros(1))
    prepared = list(prepared) if prepared is not None else [prepare(s.dag, config, ops) for s in samples]
    mu = float(targets[train_idx].mean())
    sd = float(targets[train_idx].std()) or 1.0
    z = (targets - mu) / sd
    trainable = [p for k, p in params.items() if not freeze_encoder or k.startswith("reg.")]
    opt = Adam(trainable, lr=lr)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(params)
    train_prepared = [prepared[i] for i in train_idx]
    test_prepared = [prepared[i] for i in test_idx]
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for bid, local in enumerate(_minibatches(len(train_idx), batch_size, rng)):
            batch = Batch.stack([train_prepared[i] for i in local])
            with Tape() as tape:
                try:
                    loss = mse(regression_predict(batch, params, config, kind), z[train_idx[local]])
                    tape.backward(loss)
                    opt.step()
                except NonFinite as exc:
                    raise NonFinite(f"epoch {epoch} batch {bid}: {exc}") from None
            for p in params.values():
                p.grad = None
            total += loss.item() * len(local)
        pred = predict(test_prepared, params, config, kind) * sd + mu
        record: dict[str, Any] = {"epoch": epoch, "loss": total / len(train_idx), "rmse": rmse(pred, targets[test_idx])}
        try:
            record["pearson"] = pearson(pred, targets[test_idx])
        except DegenerateTargets as exc:
            record["pearson"] = None
            record["pearson_error"] = str(exc)
        result.metrics.append(record)
        result.timings.append(time.perf_counter() - t0)
        log.info("reg epoch %d loss %.4f rmse %.4f r %s", epoch, record["loss"], record["rmse"], record["pearson"])
        _save_epoch(
            out,
            f"epoch{epoch:03d}.pact",
            params,
            {"kind": "regression", "readout": kind, "model": config.to_dict(), "ops": list(ops.ops), "target_mean": mu, "target_sd": sd},
        )
        if on_epoch is not None:
            on_epoch(record)
    result.final = dict(result.metrics[-1])
    return result

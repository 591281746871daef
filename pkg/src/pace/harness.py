"""Synthetic data, the structure-sensitive score, baselines and experiment records."""

from __future__ import annotations

import json
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .dag import DagSample, LabeledDag, OperationDictionary, topological_order, validate
from .encoder import ModelConfig, prepare
from .errors import DegenerateTargets, GenerationFailed
from .training import pearson, rmse, split_indices, train_regressor

SCORE_LENGTH = 1.0
SCORE_DESIGNATED = 0.5
SCORE_SOURCES = -0.3


@dataclass(frozen=True)
class GeneratorConfig:
    n_min: int = 4
    n_max: int = 10
    n_ops: int = 5
    edge_prob: float = 0.3
    connectivity: bool = True
    seed: int = 0
    link_components: bool = True
    shuffle_ids: bool = False
    label_rule: str = "uniform"
    label_noise: float = 0.1

    def __post_init__(self) -> None:
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if not 0.0 < self.edge_prob < 1.0:
            raise ValueError("edge_prob must lie in (0, 1)")
        if self.n_ops < 1:
            raise ValueError("n_ops must be positive")
        if self.label_rule not in ("uniform", "structured"):
            raise ValueError("label_rule must be 'uniform' or 'structured'")
        if self.label_rule == "structured" and self.n_ops < 2:
            raise ValueError("structured labels need at least two operations")


def _components(n: int, edges: Sequence[tuple[int, int]]) -> list[list[int]]:
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    groups: dict[int, list[int]] = {}
    for v in range(n):
        groups.setdefault(find(v), []).append(v)
    return [groups[k] for k in sorted(groups)]


def random_dag(cfg: GeneratorConfig, rng: np.random.Generator) -> LabeledDag:
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    edges: list[tuple[int, int]] = []
    for _ in range(100):
        keep = rng.random(len(pairs)) < cfg.edge_prob
        edges = [p for p, k in zip(pairs, keep) if k]
        if not cfg.connectivity or len(_components(n, edges)) == 1:
            break
    else:
        comps = _components(n, edges)
        if not cfg.link_components:
            raise GenerationFailed("no weakly connected sample within 100 tries")
        for a, b in zip(comps, comps[1:]):
            u, v = a[-1], b[0]
            edges.append((min(u, v), max(u, v)))
    if cfg.label_rule == "uniform":
        labels = [int(x) for x in rng.integers(0, cfg.n_ops, size=n)]
    else:
        labels = _structured_labels(n, edges, cfg, rng)
    dag = LabeledDag(n, tuple(edges), tuple(labels))
    if cfg.shuffle_ids:
        dag = dag.relabel([int(x) for x in rng.permutation(n)])
    validate(dag)
    return dag


def _structured_labels(
    n: int, edges: Sequence[tuple[int, int]], cfg: GeneratorConfig, rng: np.random.Generator
) -> list[int]:
    # Sources get op 0; other nodes follow their predecessors' ops and in-degree,
    # with probability ``label_noise`` of a uniform non-source op instead.
    preds: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        preds[v].append(u)
    k = cfg.n_ops - 1
    labels = [0] * n
    for v in range(n):
        if not preds[v]:
            continue
        if rng.random() < cfg.label_noise:
            labels[v] = 1 + int(rng.integers(0, k))
        else:
            labels[v] = 1 + (max(labels[u] for u in preds[v]) + len(preds[v])) % k
    return labels


def longest_path_profile(dag: LabeledDag, designated: int = 0) -> tuple[int, int]:
    """Longest path length in edges and the most designated-op nodes on any longest path."""
    order = topological_order(dag)
    if order is None:
        raise ValueError("graph is cyclic")
    best: list[tuple[int, int]] = [(0, int(dag.labels[v] == designated)) for v in range(dag.n)]
    preds = dag.predecessors()
    for v in order:
        mark = int(dag.labels[v] == designated)
        for u in preds[v]:
            length, count = best[u]
            cand = (length + 1, count + mark)
            if cand > best[v]:
                best[v] = cand
    return max(best) if best else (0, 0)


def structure_score(dag: LabeledDag, designated: int = 0) -> float:
    length, count = longest_path_profile(dag, designated)
    return SCORE_LENGTH * length + SCORE_DESIGNATED * count + SCORE_SOURCES * len(dag.sources())


def make_dataset(cfg: GeneratorConfig, count: int, with_scores: bool = True) -> list[DagSample]:
    rng = np.random.default_rng(cfg.seed)
    out = []
    for _ in range(count):
        dag = random_dag(cfg, rng)
        out.append(DagSample(dag, structure_score(dag) if with_scores else None))
    return out


def op_histogram(dag: LabeledDag, n_ops: int) -> np.ndarray:
    return np.bincount(np.asarray(dag.labels, dtype=np.int64), minlength=n_ops)[:n_ops].astype(np.float64)


def bag_of_ops_baseline(samples: Sequence[DagSample], n_ops: int, seed: int) -> dict[str, float]:
    """Least-squares regression on operation-count histograms, same split as the regressor."""
    y = np.array([s.target for s in samples], dtype=np.float64)
    if len(y) < 2 or np.ptp(y) == 0.0:
        raise DegenerateTargets("targets have zero variance")
    X = np.stack([np.append(op_histogram(s.dag, n_ops), 1.0) for s in samples])
    train_idx, test_idx = split_indices(len(samples), seed)
    coef, *_ = np.linalg.lstsq(X[train_idx], y[train_idx], rcond=None)
    pred = X[test_idx] @ coef
    return {"rmse": rmse(pred, y[test_idx]), "pearson": pearson(pred, y[test_idx])}


# Config overrides per ablation arm. "no_dag2seq" keeps only a sinusoidal
# encoding of the canonical position and drops the mask; the ordering arms
# feed topological/BFS linearizations with adjacency-vector features to the
# same masked Transformer.
ABLATION_VARIANTS: dict[str, dict[str, Any]] = {
    "mask": {},
    "no_mask": {"use_mask": False},
    "no_dag2seq": {"use_mask": False, "pe_mode": "sinusoidal"},
    "topological": {"ordering": "topological", "pe_mode": "adjacency"},
    "bfs": {"ordering": "bfs", "pe_mode": "adjacency"},
}


def run_ablation(
    samples: Sequence[DagSample],
    base: ModelConfig,
    ops: OperationDictionary,
    seeds: Sequence[int],
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    kind: str = "output",
    split_seed: int = 0,
    variants: Sequence[str] | None = None,
) -> dict[str, dict[str, Any]]:
    """Train every arm on the same split for each seed; mean and sd of held-out Pearson r."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    names = list(ABLATION_VARIANTS) if variants is None else list(variants)
    table: dict[str, dict[str, Any]] = {}
    for name in names:
        raw = base.to_dict()
        raw.update(ABLATION_VARIANTS[name])
        config = ModelConfig.from_dict(raw)
        prepared = [prepare(s.dag, config, ops) for s in samples]
        rs = []
        for seed in seeds:
            result = train_regressor(
                samples, config, ops, kind, epochs, seed, lr=lr, batch_size=batch_size,
                prepared=prepared, split_seed=split_seed,
            )
            rs.append(float(result.final["pearson"]))
        table[name] = {
            "pearson": rs,
            "mean": float(np.mean(rs)),
            "sd": float(np.std(rs, ddof=1)) if len(rs) > 1 else 0.0,
        }
    return table


@dataclass
class ExperimentRecord:
    config: dict[str, Any]
    seed: int
    epochs: list[dict[str, Any]] = field(default_factory=list)
    final: dict[str, Any] = field(default_factory=dict)
    checkpoint: str | None = None
    timings: dict[str, Any] = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(self), sort_keys=True))
            fh.write("\n")

    @classmethod
    def read_all(cls, path: str | Path) -> list[ExperimentRecord]:
        with open(path, encoding="utf-8") as fh:
            return [cls(**json.loads(line)) for line in fh if line.strip()]


def epoch_timing(timings: Sequence[float]) -> dict[str, float]:
    """Median of up to three per-epoch wall-clock times, plus the total."""
    tail = sorted(timings[-3:])
    return {"median_epoch_s": float(tail[len(tail) // 2]) if tail else 0.0, "total_s": float(sum(timings))}


class Stopwatch:
    def __enter__(self) -> Stopwatch:
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc: object) -> None:
        self.elapsed = time.perf_counter() - self.start

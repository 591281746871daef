"""Labeled DAG data model, validation, normalization and the line-delimited file format."""

from __future__ import annotations

import heapq
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

from .errors import BadLabel, CycleDetected, DuplicateEdge, ParseError, SelfLoop, ValidationError

OUTPUT_TOKEN = "<output>"
MASK_TOKEN = "<mask>"
END_TOKEN = "<end>"
START_TOKEN = "<start>"
RESERVED = (OUTPUT_TOKEN, MASK_TOKEN, END_TOKEN, START_TOKEN)


@dataclass(frozen=True)
class OperationDictionary:
    """User operations followed by the reserved symbols.

    Index layout: ``0..k-1`` user ops, then OUTPUT, MASK, END, START.
    """

    ops: tuple[str, ...]

    def __post_init__(self) -> None:
        ops = tuple(self.ops)
        object.__setattr__(self, "ops", ops)
        if len(set(ops)) != len(ops):
            raise ValueError("operation names must be unique")
        clash = set(ops) & set(RESERVED)
        if clash:
            raise ValueError(f"reserved symbols used as operations: {sorted(clash)}")

    def __len__(self) -> int:
        return len(self.ops)

    @property
    def output(self) -> int:
        return len(self.ops)

    @property
    def mask(self) -> int:
        return len(self.ops) + 1

    @property
    def end(self) -> int:
        return len(self.ops) + 2

    @property
    def start(self) -> int:
        return len(self.ops) + 3

    @property
    def vocab_size(self) -> int:
        return len(self.ops) + len(RESERVED)

    @property
    def symbols(self) -> tuple[str, ...]:
        return self.ops + RESERVED

    def index(self, name: str) -> int:
        try:
            return self.symbols.index(name)
        except ValueError:
            raise BadLabel(f"unknown operation {name!r}") from None

    def name(self, idx: int) -> str:
        if not 0 <= idx < self.vocab_size:
            raise BadLabel(f"label index {idx} outside dictionary")
        return self.symbols[idx]

    @classmethod
    def default(cls, k: int) -> OperationDictionary:
        return cls(tuple(f"op{i}" for i in range(k)))


@dataclass(frozen=True)
class LabeledDag:
    n: int
    edges: tuple[tuple[int, int], ...]
    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", tuple(sorted((int(u), int(v)) for u, v in self.edges)))
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))

    @property
    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(self.edges)

    def successors(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            out[u].append(v)
        return out

    def predecessors(self) -> list[list[int]]:
        inc: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            inc[v].append(u)
        return inc

    def in_degrees(self) -> list[int]:
        deg = [0] * self.n
        for _, v in self.edges:
            deg[v] += 1
        return deg

    def out_degrees(self) -> list[int]:
        deg = [0] * self.n
        for u, _ in self.edges:
            deg[u] += 1
        return deg

    def sinks(self) -> list[int]:
        return [i for i, d in enumerate(self.out_degrees()) if d == 0]

    def sources(self) -> list[int]:
        return [i for i, d in enumerate(self.in_degrees()) if d == 0]

    def relabel(self, perm: Sequence[int]) -> LabeledDag:
        """Copy with node ``i`` renamed to ``perm[i]``."""
        labels = [0] * self.n
        for i, p in enumerate(perm):
            labels[p] = self.labels[i]
        return LabeledDag(self.n, tuple((perm[u], perm[v]) for u, v in self.edges), tuple(labels))

    def with_labels(self, labels: Sequence[int]) -> LabeledDag:
        return LabeledDag(self.n, self.edges, tuple(labels))


@dataclass(frozen=True)
class DagSample:
    dag: LabeledDag
    target: float | None = None

    def __post_init__(self) -> None:
        if self.target is not None and not math.isfinite(self.target):
            raise ValidationError(f"non-finite target {self.target!r}")


def topological_order(dag: LabeledDag) -> list[int] | None:
    """Kahn's algorithm with smallest-index tie breaking; ``None`` if a cycle exists."""
    indeg = dag.in_degrees()
    succ = dag.successors()
    ready = [i for i in range(dag.n) if indeg[i] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    return order if len(order) == dag.n else None


def validate(dag: LabeledDag, num_labels: int | None = None) -> None:
    """Raise a ``ValidationError`` subclass unless ``dag`` is a well-formed labeled DAG.

    ``num_labels`` bounds the admissible label indices; pass
    ``ops.output + 1`` to admit user operations plus the OUTPUT symbol.
    """
    if dag.n < 0:
        raise ValidationError("negative node count")
    if len(dag.labels) != dag.n:
        raise BadLabel(f"{len(dag.labels)} labels for {dag.n} nodes")
    for lab in dag.labels:
        if lab < 0 or (num_labels is not None and lab >= num_labels):
            raise BadLabel(f"label index {lab} outside dictionary")
    seen: set[tuple[int, int]] = set()
    for u, v in dag.edges:
        if not (0 <= u < dag.n and 0 <= v < dag.n):
            raise ValidationError(f"edge ({u},{v}) references a missing node")
        if u == v:
            raise SelfLoop(f"self-loop on node {u}")
        if (u, v) in seen:
            raise DuplicateEdge(f"duplicate edge ({u},{v})")
        seen.add((u, v))
    if topological_order(dag) is None:
        raise CycleDetected("edge set contains a directed cycle")


def is_valid(dag: LabeledDag, num_labels: int | None = None) -> bool:
    try:
        validate(dag, num_labels)
    except ValidationError:
        return False
    return True


def add_virtual_output(dag: LabeledDag, output_label: int) -> LabeledDag:
    sinks = dag.sinks()
    if len(sinks) == 1:
        return dag
    new = dag.n
    edges = dag.edges + tuple((s, new) for s in sinks)
    return LabeledDag(dag.n + 1, edges, dag.labels + (output_label,))


def sample_to_record(sample: DagSample, ops: OperationDictionary) -> dict:
    dag = sample.dag
    rec: dict = {
        "n": dag.n,
        "labels": [ops.name(x) for x in dag.labels],
        "edges": [[u, v] for u, v in dag.edges],
    }
    if sample.target is not None:
        rec["target"] = sample.target
    return rec


def record_to_sample(rec: dict, ops: OperationDictionary, line: int | None = None) -> DagSample:
    try:
        n = rec["n"]
        labels = rec["labels"]
        edges = rec["edges"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"missing field {exc}", line) from None
    if not isinstance(n, int) or isinstance(n, bool) or n < 0:
        raise ParseError("n must be a non-negative integer", line)
    if not isinstance(labels, list) or not isinstance(edges, list):
        raise ParseError("labels and edges must be arrays", line)
    try:
        pairs = [(int(e[0]), int(e[1])) for e in edges if len(e) == 2]
    except (TypeError, ValueError, IndexError):
        raise ParseError("edges must be [u, v] integer pairs", line) from None
    if len(pairs) != len(edges):
        raise ParseError("edges must be [u, v] integer pairs", line)
    try:
        label_idx = tuple(ops.index(str(x)) for x in labels)
    except BadLabel as exc:
        raise BadLabel(f"line {line}: {exc}") from None
    dag = LabeledDag(n, tuple(pairs), label_idx)
    try:
        validate(dag, ops.output + 1)
    except ValidationError as exc:
        raise type(exc)(f"line {line}: {exc}") from None
    target = rec.get("target")
    if target is not None:
        if not isinstance(target, (int, float)) or isinstance(target, bool):
            raise ParseError("target must be a number", line)
        target = float(target)
    return DagSample(dag, target)


def _iter_records(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text:
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            yield lineno, rec


def scan_operations(path: str | Path) -> OperationDictionary:
    """Dictionary of the user operations appearing in a DAG file, sorted by name."""
    names: set[str] = set()
    for lineno, rec in _iter_records(path):
        labels = rec.get("labels")
        if not isinstance(labels, list):
            raise ParseError("labels must be an array", lineno)
        names.update(str(x) for x in labels)
    return OperationDictionary(tuple(sorted(names - set(RESERVED))))


def read_dag_file(path: str | Path, ops: OperationDictionary) -> list[DagSample]:
    return [record_to_sample(rec, ops, lineno) for lineno, rec in _iter_records(path)]


def write_dag_file(samples: Iterable[DagSample], path: str | Path, ops: OperationDictionary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s, ops), separators=(",", ":")))
            fh.write("\n")


__all__ = [
    "END_TOKEN",
    "MASK_TOKEN",
    "OUTPUT_TOKEN",
    "START_TOKEN",
    "DagSample",
    "LabeledDag",
    "OperationDictionary",
    "add_virtual_output",
    "is_valid",
    "read_dag_file",
    "scan_operations",
    "topological_order",
    "validate",
    "write_dag_file",
]

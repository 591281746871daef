"""Canonical forms of labeled DAGs by individualization-refinement.

The canonical ordering is always a topological order: leaves of the search
tree (discrete colorings) are linearized by Kahn's algorithm that pops the
ready node with the smallest color, and the leaf with the lexicographically
smallest certificate wins.
"""

from __future__ import annotations

import heapq
import struct
from collections.abc import Sequence
from dataclasses import dataclass

from .dag import LabeledDag, validate


@dataclass(frozen=True)
class CanonicalForm:
    perm: tuple[int, ...]
    canon_edges: tuple[tuple[int, int], ...]
    canon_labels: tuple[int, ...]
    certificate: bytes

    @property
    def n(self) -> int:
        return len(self.perm)

    @property
    def inverse(self) -> tuple[int, ...]:
        inv = [0] * len(self.perm)
        for i, p in enumerate(self.perm):
            inv[p] = i
        return tuple(inv)

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return self.canon_edges

    def as_dag(self) -> LabeledDag:
        return LabeledDag(self.n, self.canon_edges, self.canon_labels)

    def predecessor_sets(self) -> list[list[int]]:
        preds: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.canon_edges:
            preds[v].append(u)
        return [sorted(p) for p in preds]

    def sink(self) -> int | None:
        outdeg = [0] * self.n
        for u, _ in self.canon_edges:
            outdeg[u] += 1
        sinks = [i for i, d in enumerate(outdeg) if d == 0]
        return sinks[0] if len(sinks) == 1 else None


def certificate_bytes(n: int, labels: Sequence[int], edges: Sequence[tuple[int, int]]) -> bytes:
    """Length-prefixed big-endian serialization of ``(n, labels, sorted edges)``."""
    ordered = sorted(edges)
    parts = [struct.pack(">I", n), struct.pack(f">{n}I", *labels), struct.pack(">I", len(ordered))]
    for u, v in ordered:
        parts.append(struct.pack(">II", u, v))
    return b"".join(parts)


def _rank(keys: list) -> list[int]:
    table = {k: i for i, k in enumerate(sorted(set(keys)))}
    return [table[k] for k in keys]


def _refine(colors: list[int], preds: list[list[int]], succs: list[list[int]]) -> list[int]:
    count = len(set(colors))
    while True:
        sigs = [
            (
                colors[v],
                tuple(sorted(colors[p] for p in preds[v])),
                tuple(sorted(colors[s] for s in succs[v])),
            )
            for v in range(len(colors))
        ]
        new = _rank(sigs)
        new_count = len(set(new))
        if new_count == count:
            return new
        colors, count = new, new_count


def _individualize(colors: list[int], v: int) -> list[int]:
    return _rank([(c, 0 if u == v else 1) for u, c in enumerate(colors)])


def _target_cell(colors: list[int]) -> list[int] | None:
    cells: dict[int, list[int]] = {}
    for v, c in enumerate(colors):
        cells.setdefault(c, []).append(v)
    best: tuple[int, int] | None = None
    for c, members in cells.items():
        if len(members) > 1 and (best is None or (len(members), c) < best):
            best = (len(members), c)
    return None if best is None else cells[best[1]]


def _topological_by_color(colors: list[int], preds: list[list[int]], succs: list[list[int]]) -> list[int]:
    indeg = [len(p) for p in preds]
    ready = [(colors[v], v) for v in range(len(colors)) if indeg[v] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        _, u = heapq.heappop(ready)
        order.append(u)
        for w in succs[u]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(ready, (colors[w], w))
    return order


def _twin_generators(dag: LabeledDag, preds: list[list[int]], succs: list[list[int]]) -> list[list[int]]:
    # Nodes sharing label, predecessor set and successor set are interchangeable.
    classes: dict[tuple, list[int]] = {}
    for v in range(dag.n):
        key = (dag.labels[v], tuple(sorted(preds[v])), tuple(sorted(succs[v])))
        classes.setdefault(key, []).append(v)
    gens = []
    for members in classes.values():
        for a, b in zip(members, members[1:]):
            g = list(range(dag.n))
            g[a], g[b] = b, a
            gens.append(g)
    return gens


def _same_orbit(v: int, explored: list[int], gens: list[list[int]]) -> bool:
    if not explored or not gens:
        return False
    parent: dict[int, int] = {}

    def find(x: int) -> int:
        while parent.get(x, x) != x:
            x = parent[x]
        return x

    for g in gens:
        for x, y in enumerate(g):
            if x != y:
                rx, ry = find(x), find(y)
                if rx != ry:
                    parent[rx] = ry
    root = find(v)
    return any(find(w) == root for w in explored)


class _Search:
    def __init__(self, dag: LabeledDag) -> None:
        self.dag = dag
        self.preds = dag.predecessors()
        self.succs = dag.successors()
        self.autos: list[list[int]] = _twin_generators(dag, self.preds, self.succs)
        self.best_cert: bytes | None = None
        self.best_order: list[int] | None = None

    def leaf(self, colors: list[int]) -> None:
        order = _topological_by_color(colors, self.preds, self.succs)
        pos = [0] * self.dag.n
        for i, v in enumerate(order):
            pos[v] = i
        labels = [self.dag.labels[v] for v in order]
        edges = [(pos[u], pos[v]) for u, v in self.dag.edges]
        cert = certificate_bytes(self.dag.n, labels, edges)
        if self.best_cert is None or cert < self.best_cert:
            self.best_cert, self.best_order = cert, order
        elif cert == self.best_cert:
            assert self.best_order is not None
            g = list(range(self.dag.n))
            for a, b in zip(self.best_order, order):
                g[a] = b
            self.autos.append(g)

    def run(self, colors: list[int], prefix: list[int]) -> None:
        cell = _target_cell(colors)
        if cell is None:
            self.leaf(colors)
            return
        explored: list[int] = []
        for v in cell:
            gens = [g for g in self.autos if all(g[p] == p for p in prefix)]
            if _same_orbit(v, explored, gens):
                continue
            child = _refine(_individualize(colors, v), self.preds, self.succs)
            self.run(child, prefix + [v])
            explored.append(v)


def canonical_form(dag: LabeledDag) -> CanonicalForm:
    validate(dag)
    search = _Search(dag)
    indeg, outdeg = dag.in_degrees(), dag.out_degrees()
    initial = _rank([(dag.labels[v], indeg[v], outdeg[v]) for v in range(dag.n)])
    search.run(_refine(initial, search.preds, search.succs), [])
    order = search.best_order if search.best_order is not None else []
    perm = [0] * dag.n
    for i, v in enumerate(order):
        perm[v] = i
    canon_edges = tuple(sorted((perm[u], perm[v]) for u, v in dag.edges))
    canon_labels = tuple(dag.labels[v] for v in order)
    return CanonicalForm(
        perm=tuple(perm),
        canon_edges=canon_edges,
        canon_labels=canon_labels,
        certificate=search.best_cert if search.best_cert is not None else certificate_bytes(0, [], []),
    )


def certificate(dag: LabeledDag) -> bytes:
    return canonical_form(dag).certificate


def is_isomorphic(a: LabeledDag, b: LabeledDag) -> bool:
    if a.n != b.n or len(a.edges) != len(b.edges) or sorted(a.labels) != sorted(b.labels):
        return False
    return certificate(a) == certificate(b)

"""Reachability attention masks.

``m[i][j]`` is True when node ``i`` must not influence node ``j``; it is
False exactly when a directed path ``i -> j`` exists. After construction two
overrides apply: real nodes may attend to themselves, and padding slots
follow the padding policy in :func:`apply_policy`.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import BadDepths, NotATree, TooManyNodes


class _Graph(Protocol):
    @property
    def n(self) -> int: ...

    @property
    def edges(self) -> Sequence[tuple[int, int]]: ...


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    m: np.ndarray
    n_real: int

    @property
    def size(self) -> int:
        return self.m.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskMatrix):
            return NotImplemented
        return self.n_real == other.n_real and np.array_equal(self.m, other.m)

    def to_bits(self) -> bytes:
        return np.packbits(self.m, axis=None).tobytes()

    @classmethod
    def from_bits(cls, bits: bytes, size: int, n_real: int) -> MaskMatrix:
        flat = np.unpackbits(np.frombuffer(bits, dtype=np.uint8), count=size * size)
        return cls(flat.reshape(size, size).astype(bool), n_real)

    def attention_allowed(self) -> np.ndarray:
        """Boolean ``[query, key]`` matrix: query ``j`` may read key ``i`` iff ``m[i][j]`` is False."""
        return ~self.m.T


def _check_size(n: int, size: int) -> None:
    if n > size:
        raise TooManyNodes(f"{n} nodes exceed capacity {size}")


def apply_policy(reach: np.ndarray, n_real: int, size: int) -> MaskMatrix:
    """Wrap an ``n_real x n_real`` reachability matrix into a padded mask.

    Real queries never read padding keys; padding queries read every real
    node and themselves.
    """
    m = np.ones((size, size), dtype=bool)
    m[:n_real, :n_real] = ~reach
    idx = np.arange(size)
    m[idx[:n_real], idx[:n_real]] = False
    m[:n_real, n_real:] = False
    m[idx[n_real:], idx[n_real:]] = False
    return MaskMatrix(m, n_real)


def reach_dfs(n: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    succ: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        succ[u].append(v)
    reach = np.zeros((n, n), dtype=bool)
    for src in range(n):
        visited = [False] * n
        visited[src] = True
        stack = [src]
        while stack:
            j = stack.pop()
            for k in succ[j]:
                if not visited[k]:
                    reach[src, k] = True
                    visited[k] = True
                    stack.append(k)
    return reach


def floyd_distances(n: int, edges: Sequence[tuple[int, int]]) -> list[list[float]]:
    """Unit-weight shortest path lengths; ``inf`` where no path exists."""
    dist = [[math.inf] * n for _ in range(n)]
    for u, v in edges:
        dist[u][v] = 1
    for i in range(n):
        di = dist[i]
        for j in range(n):
            dj = dist[j]
            dji = dj[i]
            # relaxation through i cannot succeed from j when j cannot reach i
            if dji == math.inf:
                continue
            for k in range(n):
                if dj[k] > dji + di[k]:
                    dj[k] = dji + di[k]
    return dist


def reach_floyd(n: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    dist = floyd_distances(n, edges)
    return np.array([[d != math.inf for d in row] for row in dist], dtype=bool).reshape(n, n)


def mask_dfs(graph: _Graph, size: int) -> MaskMatrix:
    _check_size(graph.n, size)
    return apply_policy(reach_dfs(graph.n, graph.edges), graph.n, size)


def mask_floyd(graph: _Graph, size: int) -> MaskMatrix:
    _check_size(graph.n, size)
    return apply_policy(reach_floyd(graph.n, graph.edges), graph.n, size)


def _tree_parents(n: int, edges: Sequence[tuple[int, int]]) -> list[int]:
    if n == 0:
        return []
    if len(edges) != n - 1:
        raise NotATree(f"{len(edges)} edges for {n} nodes")
    parent = [-1] * n
    for u, v in edges:
        if parent[v] != -1:
            raise NotATree(f"node {v} has two parents")
        parent[v] = u
    if parent[0] != -1:
        raise NotATree("node 0 must be the root")
    if any(p == -1 for p in parent[1:]):
        raise NotATree("more than one root")
    return parent


def mask_tree_backtracking(tree: _Graph, depths: Sequence[int], size: int) -> MaskMatrix:
    """Ancestor mask of a rooted tree listed in DFS preorder, in linear time for bounded depth."""
    n = tree.n
    _check_size(n, size)
    if len(depths) != n:
        raise BadDepths("one depth per node required")
    parent = _tree_parents(n, tree.edges)
    if n and depths[0] != 0:
        raise BadDepths("root depth must be 0")
    for v in range(1, n):
        if depths[v] != depths[parent[v]] + 1:
            raise BadDepths(f"node {v} depth {depths[v]} inconsistent with parent")
    reach = np.zeros((n, n), dtype=bool)
    last_at_depth: dict[int, int] = {}
    for v in range(n):
        j = depths[v]
        if j > 0 and last_at_depth.get(j - 1) != parent[v]:
            raise NotATree("node order is not a DFS preorder")
        last_at_depth[j] = v
        for k in range(j):
            reach[last_at_depth[k], v] = True
    return apply_policy(reach, n, size)

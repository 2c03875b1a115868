"""Balanced disjoint graph partitioning (BFS growth + boundary refinement).

Stands in for METIS: clusters are grown from farthest-first seeds with a
smallest-cluster-first multi-source BFS, then boundary vertices are moved
or swapped between clusters while that strictly lowers the edge cut and
keeps every cluster within ``ceil((1 + eps) * n / p)`` nodes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .graph import Graph


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    p: int

    def __post_init__(self):
        self.assignment.setflags(write=False)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.p)

    @property
    def n_nodes(self) -> int:
        return len(self.assignment)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster)

    def validate(self, n_nodes: int | None = None) -> "Partition":
        if n_nodes is not None and len(self.assignment) != n_nodes:
            raise ValueError(f"partition covers {len(self.assignment)} nodes, graph has {n_nodes}")
        a = self.assignment
        if len(a) and (a.min() < 0 or a.max() >= self.p):
            raise ValueError(f"cluster index outside [0, {self.p})")
        if np.any(self.sizes == 0):
            raise ValueError("partition has an empty cluster")
        return self


def capacity(n_nodes: int, p: int, eps: float = 0.1) -> int:
    # float noise in (1+eps)*n/p would push an exact integer past ceil
    return math.ceil(round((1.0 + eps) * n_nodes / p, 9))


def _undirected_lists(g: Graph):
    src, dst = g.edge_array()
    keep = src != dst
    src, dst = src[keep], dst[keep]
    both_s = np.concatenate([src, dst])
    both_d = np.concatenate([dst, src])
    order = np.lexsort((both_d, both_s))
    both_s, both_d = both_s[order], both_d[order]
    ptr = np.zeros(g.n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(both_s, minlength=g.n_nodes), out=ptr[1:])
    return ptr, both_d


def _bfs_dist(ptr, nbr, sources, n):
    dist = np.full(n, -1, dtype=np.int64)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    while queue:
        u = queue.popleft()
        for v in nbr[ptr[u] : ptr[u + 1]]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _pick_seeds(ptr, nbr, n, p, rng):
    seeds = [int(rng.integers(n))]
    while len(seeds) < p:
        dist = _bfs_dist(ptr, nbr, seeds, n)
        # unreachable nodes count as infinitely far
        score = np.where(dist < 0, n + 1, dist)
        score[seeds] = -1
        seeds.append(int(np.argmax(score)))
    return seeds


def _grow(ptr, nbr, n, seeds):
    p = len(seeds)
    assign = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(p, dtype=np.int64)
    frontiers = [deque() for _ in range(p)]
    for c, s in enumerate(seeds):
        assign[s] = c
        sizes[c] = 1
        frontiers[c].extend(nbr[ptr[s] : ptr[s + 1]].tolist())
    remaining = n - p
    next_free = 0
    while remaining:
        c = int(np.argmin(sizes))
        frontier = frontiers[c]
        picked = -1
        while frontier:
            v = frontier.popleft()
            if assign[v] < 0:
                picked = v
                break
        if picked < 0:
            while assign[next_free] >= 0:
                next_free += 1
            picked = next_free
        assign[picked] = c
        sizes[c] += 1
        remaining -= 1
        frontier.extend(nbr[ptr[picked] : ptr[picked + 1]].tolist())
    return assign


class _Refiner:
    """Incremental edge-cut bookkeeping for vertex moves and swaps."""

    def __init__(self, g: Graph, assign, p, cap):
        self.n = g.n_nodes
        self.p = p
        self.cap = cap
        self.assign = assign
        src, dst = g.edge_array()
        keep = src != dst
        self.src, self.dst = src[keep], dst[keep]
        # conn[u, c]: directed entries between u and cluster c, both directions
        self.conn = np.zeros((self.n, p), dtype=np.int64)
        np.add.at(self.conn, (self.src, assign[self.dst]), 1)
        np.add.at(self.conn, (self.dst, assign[self.src]), 1)
        self.ptr, self.nbr = _undirected_lists(g)
        self.sizes = np.bincount(assign, minlength=p)

    def cut(self) -> int:
        return int(np.sum(self.assign[self.src] != self.assign[self.dst]))

    def _pair_weight(self, u, vs):
        row = self.nbr[self.ptr[u] : self.ptr[u + 1]]
        return np.array([np.count_nonzero(row == v) for v in vs], dtype=np.int64)

    def move(self, u, b):
        a = self.assign[u]
        row = self.nbr[self.ptr[u] : self.ptr[u + 1]]
        np.subtract.at(self.conn[:, a], row, 1)
        np.add.at(self.conn[:, b], row, 1)
        self.assign[u] = b
        self.sizes[a] -= 1
        self.sizes[b] += 1

    def best_move(self):
        own = self.conn[np.arange(self.n), self.assign]
        gains = self.conn - own[:, None]
        feasible = (self.sizes[None, :] < self.cap) & (self.sizes[self.assign] > 1)[:, None]
        feasible[np.arange(self.n), self.assign] = False
        gains = np.where(feasible, gains, np.iinfo(np.int64).min)
        flat = int(np.argmax(gains))
        u, b = divmod(flat, self.p)
        return int(gains[u, b]), u, b

    def best_swap(self):
        own = self.conn[np.arange(self.n), self.assign]
        gains = self.conn - own[:, None]
        best = (0, -1, -1)
        for u in np.flatnonzero(np.max(np.where(np.eye(self.p, dtype=bool)[self.assign], -1, gains), axis=1) > 0):
            a = self.assign[u]
            for b in np.flatnonzero(gains[u] > 0):
                if b == a:
                    continue
                vs = np.flatnonzero(self.assign == b)
                total = gains[u, b] + (self.conn[vs, a] - self.conn[vs, b]) - 2 * self._pair_weight(u, vs)
                k = int(np.argmax(total))
                cand = (int(total[k]), int(u), int(vs[k]))
                if cand[0] > best[0] or (cand[0] == best[0] and cand[0] > 0 and cand[1:] < best[1:]):
                    best = cand
        return best

    def run(self, budget):
        moves = 0
        while moves < budget:
            gain, u, b = self.best_move()
            if gain > 0:
                self.move(u, b)
                moves += 1
                continue
            gain, u, v = self.best_swap()
            if gain <= 0:
                break
            a, b = self.assign[u], self.assign[v]
            self.move(u, b)
            self.move(v, a)
            moves += 2
        return moves


def partition_graph(g: Graph, p: int, seed: int = 0, eps: float = 0.1, refine: bool = True) -> Partition:
    """Split the nodes of ``g`` into ``p`` balanced, connected-ish clusters."""
    n = g.n_nodes
    if p < 1:
        raise ValueError(f"cluster count must be >= 1, got {p}")
    if p > n:
        raise ValueError(f"cluster count {p} exceeds node count {n}")
    if p == 1:
        return Partition(np.zeros(n, dtype=np.int64), 1)
    rng = np.random.default_rng(seed)
    ptr, nbr = _undirected_lists(g)
    seeds = _pick_seeds(ptr, nbr, n, p, rng)
    assign = _grow(ptr, nbr, n, seeds)
    if refine:
        _Refiner(g, assign, p, capacity(n, p, eps)).run(budget=10 * n)
    return Partition(assign, p)


def partition_metrics(g: Graph, part: Partition) -> tuple[int, float]:
    """Return (directed edge cut, max cluster size / (n / p))."""
    if part.n_nodes != g.n_nodes:
        raise ValueError(f"partition covers {part.n_nodes} nodes, graph has {g.n_nodes}")
    src, dst = g.edge_array()
    a = part.assignment
    cut = int(np.sum(a[src] != a[dst]))
    balance = float(part.sizes.max() / (g.n_nodes / part.p)) if g.n_nodes else 0.0
    return cut, balance


def save_partition(part: Partition, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for u, c in enumerate(part.assignment.tolist()):
            fh.write(f"{u}\t{c}\n")
    return path


def load_partition(path, n_nodes: int | None = None) -> Partition:
    """Read ``u<TAB>cluster`` lines; the cluster count is ``1 + max``."""
    pairs = {}
    with Path(path).open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 tab-separated fields")
            pairs[int(parts[0])] = int(parts[1])
    n = n_nodes if n_nodes is not None else len(pairs)
    if sorted(pairs) != list(range(n)):
        raise ValueError(f"{path}: partition must list every node 0..{n - 1} exactly once")
    assign = np.array([pairs[u] for u in range(n)], dtype=np.int64)
    p = int(assign.max()) + 1 if n else 0
    return Partition(assign, p).validate(n)


class GraphPartitioner(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`partition_graph`.

    ``fit`` takes a :class:`~m3d.graph.Graph` and stores ``labels_`` (the
    cluster of every node) and ``partition_``.
    """

    def __init__(self, n_clusters=8, eps=0.1, refine=True, random_state=0):
        self.n_clusters = n_clusters
        self.eps = eps
        self.refine = refine
        self.random_state = random_state

    def fit(self, X, y=None):
        from ._validation import check_graph

        g = check_graph(X)
        self.partition_ = partition_graph(g, self.n_clusters, seed=self.random_state, eps=self.eps, refine=self.refine)
        self.labels_ = np.asarray(self.partition_.assignment)
        self.edge_cut_, self.balance_ = partition_metrics(g, self.partition_)
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_

    def metrics(self, X):
        check_is_fitted(self, "partition_")
        return partition_metrics(X, self.partition_)

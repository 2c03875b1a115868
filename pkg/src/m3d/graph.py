"""Attributed graph container, TSV ingestion and a hierarchical SBM generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "valid", "test")
TRAIN, VALID, TEST = 0, 1, 2


class GraphFormatError(ValueError):
    """Raised when graph files are missing or malformed."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable directed graph in CSR form with node features, labels and splits.

    ``splits`` holds one code per node: 0 = train, 1 = valid, 2 = test.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    n_classes: int

    def __post_init__(self):
        for name in ("indptr", "indices", "features", "labels", "splits"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_edges(self) -> int:
        """Number of directed CSR entries."""
        return len(self.indices)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def edge_array(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (src, dst) arrays of all directed entries."""
        src = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        return src, self.indices.copy()

    def out_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def ids_in_split(self, split) -> np.ndarray:
        code = SPLIT_NAMES.index(split) if isinstance(split, str) else int(split)
        return np.flatnonzero(self.splits == code)

    @property
    def train_ids(self) -> np.ndarray:
        return self.ids_in_split(TRAIN)

    def has_self_loops(self) -> bool:
        src, dst = self.edge_array()
        return bool(np.all(np.isin(np.arange(self.n_nodes), src[src == dst])))

    def is_symmetric(self) -> bool:
        src, dst = self.edge_array()
        fwd = set(zip(src.tolist(), dst.tolist()))
        return all((v, u) in fwd for u, v in fwd)

    def equals(self, other: "Graph") -> bool:
        """Bitwise equality of every array and the class count."""
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.splits, other.splits)
        )


def _csr_from_edges(n_nodes, src, dst):
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if len(src):
        keys = np.unique(src * n_nodes + dst)
        src, dst = np.divmod(keys, n_nodes)
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n_nodes), out=indptr[1:])
    return indptr, dst.astype(np.int64)


def build_graph(n_nodes, src, dst, features, labels, splits, n_classes=None) -> Graph:
    """Assemble a validated :class:`Graph` from an edge list.

    Duplicate edges are collapsed; edge direction is kept as given.
    """
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    if len(src) != len(dst):
        raise ValueError("src and dst must have equal length")
    if len(src) and (src.min() < 0 or dst.min() < 0 or src.max() >= n_nodes or dst.max() >= n_nodes):
        raise GraphFormatError(f"edge endpoint out of range [0, {n_nodes})")
    features = np.asarray(features)
    features = np.array(features, dtype=np.float32 if features.dtype == np.float32 else np.float64)
    if features.ndim != 2 or features.shape[0] != n_nodes:
        raise GraphFormatError(f"features must have shape ({n_nodes}, d_in); got {features.shape}")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    splits = np.asarray(splits, dtype=np.int8).ravel()
    if labels.shape != (n_nodes,) or splits.shape != (n_nodes,):
        raise GraphFormatError("labels and splits need one entry per node")
    if n_nodes and labels.min() < 0:
        raise GraphFormatError("labels must be non-negative")
    if np.any((splits < 0) | (splits > 2)):
        raise GraphFormatError("split codes must be 0, 1 or 2")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n_nodes else 0
    if n_nodes and labels.max() >= n_classes:
        raise GraphFormatError("label index exceeds n_classes")
    indptr, indices = _csr_from_edges(n_nodes, src, dst)
    return Graph(indptr, indices, features, labels, splits, int(n_classes))


def normalize_graph(g: Graph, symmetrize: bool = True, add_self_loops: bool = False) -> Graph:
    """Deduplicate edges, optionally add reverse edges and self-loops."""
    src, dst = g.edge_array()
    if symmetrize:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    if add_self_loops:
        loops = np.arange(g.n_nodes)
        src, dst = np.concatenate([src, loops]), np.concatenate([dst, loops])
    indptr, indices = _csr_from_edges(g.n_nodes, src, dst)
    return Graph(indptr, indices, g.features, g.labels, g.splits, g.n_classes)


def edge_homophily(g: Graph) -> float:
    """Fraction of non-loop edges whose endpoints share a label."""
    src, dst = g.edge_array()
    keep = src != dst
    if not keep.any():
        return float("nan")
    return float(np.mean(g.labels[src[keep]] == g.labels[dst[keep]]))


# ---------------------------------------------------------------------------
# TSV ingestion


def _data_lines(path: Path):
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _require(directory: Path, name: str) -> Path:
    path = directory / name
    if not path.is_file():
        raise GraphFormatError(f"missing file: {path}")
    return path


def _parse_pairs(path: Path, second):
    out = []
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError(f"{path.name}:{lineno}: expected 2 tab-separated fields")
        try:
            out.append((int(parts[0]), second(parts[1])))
        except ValueError as exc:
            raise GraphFormatError(f"{path.name}:{lineno}: {exc}") from None
    return out


def _split_code(token):
    token = token.strip()
    if token not in SPLIT_NAMES:
        raise ValueError(f"unknown split tag {token!r}")
    return SPLIT_NAMES.index(token)


def _per_node(pairs, n_nodes, fname):
    values = [None] * n_nodes
    for u, val in pairs:
        if not 0 <= u < n_nodes:
            raise GraphFormatError(f"{fname}: node {u} out of range [0, {n_nodes})")
        values[u] = val
    missing = [u for u, v in enumerate(values) if v is None]
    if missing:
        raise GraphFormatError(f"{fname}: no entry for node {missing[0]}")
    return values


def load_graph(directory, symmetrize: bool = True, add_self_loops: bool = False) -> Graph:
    """Read ``edges.tsv``, ``features.tsv``, ``labels.tsv`` and ``splits.tsv``.

    The node count is the number of feature rows. Edges are symmetrized by
    default; pass ``symmetrize=False`` to keep the file's direction.
    """
    directory = Path(directory)
    edges_p = _require(directory, "edges.tsv")
    feats_p = _require(directory, "features.tsv")
    labels_p = _require(directory, "labels.tsv")
    splits_p = _require(directory, "splits.tsv")

    rows = []
    width = None
    for lineno, line in _data_lines(feats_p):
        try:
            row = [float(tok) for tok in line.split("\t")]
        except ValueError as exc:
            raise GraphFormatError(f"features.tsv:{lineno}: {exc}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise GraphFormatError(f"features.tsv:{lineno}: expected {width} values, got {len(row)}")
        if not all(math.isfinite(x) for x in row):
            raise GraphFormatError(f"features.tsv:{lineno}: non-finite feature value")
        rows.append(row)
    n_nodes = len(rows)
    features = np.array(rows, dtype=np.float64).reshape(n_nodes, width or 0)

    edges = _parse_pairs(edges_p, int)
    for u, v in edges:
        if not (0 <= u < n_nodes and 0 <= v < n_nodes):
            raise GraphFormatError(f"edges.tsv: edge ({u}, {v}) out of range [0, {n_nodes})")
    labels = _per_node(_parse_pairs(labels_p, int), n_nodes, "labels.tsv")
    splits = _per_node(_parse_pairs(splits_p, _split_code), n_nodes, "splits.tsv")

    src = [u for u, _ in edges]
    dst = [v for _, v in edges]
    g = build_graph(n_nodes, src, dst, features, labels, splits)
    if symmetrize or add_self_loops:
        g = normalize_graph(g, symmetrize=symmetrize, add_self_loops=add_self_loops)
    return g


def save_graph(g: Graph, directory) -> Path:
    """Write the four TSV files; floats use ``repr`` so reloading is exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    src, dst = g.edge_array()
    with (directory / "edges.tsv").open("w") as fh:
        fh.write("# u\tv\n")
        for u, v in zip(src.tolist(), dst.tolist()):
            fh.write(f"{u}\t{v}\n")
    with (directory / "features.tsv").open("w") as fh:
        for row in g.features.astype(np.float64).tolist():
            fh.write("\t".join(repr(x) for x in row) + "\n")
    with (directory / "labels.tsv").open("w") as fh:
        for u, y in enumerate(g.labels.tolist()):
            fh.write(f"{u}\t{y}\n")
    with (directory / "splits.tsv").open("w") as fh:
        for u, s in enumerate(g.splits.tolist()):
            fh.write(f"{u}\t{SPLIT_NAMES[s]}\n")
    return directory


# ---------------------------------------------------------------------------
# Hierarchical stochastic block model


@dataclass(frozen=True)
class SbmConfig:
    """Parameters of the class/cluster block model.

    Clusters are laid out contiguously: cluster ``j`` holds nodes
    ``[j * nodes_per_cluster, (j + 1) * nodes_per_cluster)`` and belongs to
    class ``j // clusters_per_class``.
    """

    n_classes: int = 3
    clusters_per_class: int = 2
    nodes_per_cluster: int = 200
    p_intra: float = 0.04
    p_cross_same: float = 0.002
    p_cross_diff: float = 0.002
    minority_fraction: float = 0.15
    feature_sigma: float = 1.0
    n_features: int = 16
    train_fraction: float = 0.2
    valid_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        for name in ("p_intra", "p_cross_same", "p_cross_diff"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if min(self.n_classes, self.clusters_per_class, self.nodes_per_cluster) < 1:
            raise ValueError("class, cluster and node counts must be >= 1")
        if not 0.0 <= self.minority_fraction < 0.5:
            raise ValueError("minority_fraction must lie in [0, 0.5)")
        if self.minority_fraction > 0 and self.n_classes < 2:
            raise ValueError("relabeling needs at least two classes")
        if self.train_fraction < 0 or self.valid_fraction < 0 or self.train_fraction + self.valid_fraction > 1:
            raise ValueError("split fractions must be non-negative and sum to <= 1")
        if self.feature_sigma < 0:
            raise ValueError("feature_sigma must be non-negative")
        if self.n_features < self.n_classes:
            raise ValueError(
                f"n_features={self.n_features} < n_classes={self.n_classes}: orthonormal prototypes impossible"
            )
        return self

    @property
    def n_nodes(self) -> int:
        return self.n_classes * self.clusters_per_class * self.nodes_per_cluster


@dataclass
class SbmTruth:
    """Ground-truth structure returned alongside a generated graph."""

    cluster: np.ndarray
    cluster_class: np.ndarray
    relabeled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def generate_hierarchical_sbm(cfg: SbmConfig, return_truth: bool = False):
    """Sample an undirected block-model graph with heterophilic minorities.

    Edge probability between two nodes depends on whether they share a
    cluster, share a cluster class, or neither. In each cluster
    ``floor(minority_fraction * nodes_per_cluster)`` nodes are relabeled
    round-robin over the other classes; their features are drawn from the
    new class. Features are ``e_label + feature_sigma * N(0, I)`` with
    ``e_c`` the c-th standard basis vector.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_nodes
    n_clusters = cfg.n_classes * cfg.clusters_per_class
    cluster = np.repeat(np.arange(n_clusters), cfg.nodes_per_cluster)
    cluster_class = cluster // cfg.clusters_per_class

    iu, ju = np.triu_indices(n, k=1)
    same_cluster = cluster[iu] == cluster[ju]
    same_class = cluster_class[iu] == cluster_class[ju]
    prob = np.where(same_cluster, cfg.p_intra, np.where(same_class, cfg.p_cross_same, cfg.p_cross_diff))
    keep = rng.random(len(iu)) < prob
    src, dst = iu[keep], ju[keep]
    del iu, ju, same_cluster, same_class, prob, keep

    labels = cluster_class.copy()
    relabeled = np.zeros(n, dtype=bool)
    n_minor = math.floor(cfg.minority_fraction * cfg.nodes_per_cluster)
    if n_minor:
        for j in range(n_clusters):
            members = np.arange(j * cfg.nodes_per_cluster, (j + 1) * cfg.nodes_per_cluster)
            chosen = np.sort(rng.choice(members, size=n_minor, replace=False))
            others = [c for c in range(cfg.n_classes) if c != cluster_class[members[0]]]
            for i, u in enumerate(chosen):
                labels[u] = others[i % len(others)]
            relabeled[chosen] = True

    features = cfg.feature_sigma * rng.standard_normal((n, cfg.n_features))
    features[np.arange(n), labels] += 1.0

    order = rng.permutation(n)
    n_train = math.floor(cfg.train_fraction * n)
    n_valid = math.floor(cfg.valid_fraction * n)
    _cover_classes(order, labels, n_train, cfg.n_classes)
    splits = np.full(n, TEST, dtype=np.int8)
    splits[order[:n_train]] = TRAIN
    splits[order[n_train : n_train + n_valid]] = VALID

    g = build_graph(
        n,
        np.concatenate([src, dst]),
        np.concatenate([dst, src]),
        features,
        labels,
        splits,
        n_classes=cfg.n_classes,
    )
    if return_truth:
        return g, SbmTruth(cluster=cluster, cluster_class=cluster_class, relabeled=relabeled)
    return g


def _cover_classes(order, labels, n_train, n_classes):
    """Swap nodes into the training prefix of ``order`` until every class is present.

    Only acts when a class is missing and the prefix is large enough; the
    node given up always belongs to a class with at least two training nodes.
    """
    if n_train < n_classes:
        return
    counts = np.bincount(labels[order[:n_train]], minlength=n_classes)
    for c in np.flatnonzero(counts == 0):
        later = n_train + np.flatnonzero(labels[order[n_train:]] == c)
        if len(later) == 0:
            continue
        donors = np.flatnonzero(counts[labels[order[:n_train]]] > 1)
        i, j = donors[-1], later[0]
        counts[labels[order[i]]] -= 1
        counts[c] += 1
        order[i], order[j] = order[j], order[i]


def toy_graph() -> Graph:
    """Two triangles {0,1,2} and {3,4,5} bridged by the edge 2-3.

    Labels follow the triangles, nodes 0 and 3 are the training set.
    """
    edges = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (3, 5), (4, 5)]
    src = [u for u, _ in edges] + [v for _, v in edges]
    dst = [v for _, v in edges] + [u for u, _ in edges]
    features = np.array(
        [
            [1.0, 0.1, 0.0],
            [0.9, 0.0, 0.2],
            [0.8, 0.3, 0.1],
            [0.1, 0.9, 0.0],
            [0.0, 1.0, 0.3],
            [0.2, 0.8, 0.1],
        ]
    )
    labels = [0, 0, 0, 1, 1, 1]
    splits = [TRAIN, VALID, TEST, TRAIN, VALID, TEST]
    return build_graph(6, src, dst, features, labels, splits, n_classes=2)

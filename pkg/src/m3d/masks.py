"""Node universe with virtual nodes and the hierarchical attention masks.

Universe layout: real nodes ``[0, N)``, cluster-virtual nodes
``[N, N + P)``, label (global) virtual nodes ``[N + P, N + P + |Y|)``.

Mask kinds:

========  ============================================================
``L1``    real u -> real v if v is within ``k`` hops, i.e. ``(A + I)^k``
``L2``    real u -> real v for every edge, plus self-loops
``C1``    cluster virtual -> cluster virtual (complete)
``C2``    cluster virtual -> every real node
``C3``    real u -> real v when both sit in the same cluster
``C4``    real u -> {u, its cluster virtual}; cluster virtual -> members
``G1``    real u -> real v for all pairs
``G2``    real <-> label-free virtuals, both directions
``G3``    real u -> every label virtual; label virtual c -> train nodes of c
========  ============================================================
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph
from .partition import Partition

KINDS = ("L1", "L2", "C1", "C2", "C3", "C4", "G1", "G2", "G3")
TAXONOMY_KINDS = ("L1", "C1", "C2", "C3", "G1", "G2")
MODES = ("auto", "dense", "sparse")


@dataclass(frozen=True, eq=False)
class NodeUniverse:
    n_real: int
    n_cluster: int
    n_global: int
    virtual_features: np.ndarray
    assignment: np.ndarray
    train_ids_by_class: tuple

    @property
    def total(self) -> int:
        return self.n_real + self.n_cluster + self.n_global

    @property
    def cluster_ids(self) -> np.ndarray:
        return np.arange(self.n_real, self.n_real + self.n_cluster)

    @property
    def global_ids(self) -> np.ndarray:
        return np.arange(self.n_real + self.n_cluster, self.total)

    @property
    def global_labels(self) -> np.ndarray:
        return np.arange(self.n_global)

    def features(self, g: Graph) -> np.ndarray:
        """Real features stacked on top of virtual-node features."""
        return np.vstack([g.features, self.virtual_features.astype(g.features.dtype)])

    @property
    def n_train(self) -> int:
        return sum(len(t) for t in self.train_ids_by_class)


def extend_universe(g: Graph, part: Partition) -> NodeUniverse:
    """Append one virtual node per cluster and one per class.

    Cluster virtuals carry the mean feature of their members; label virtuals
    the mean feature of training nodes of that class (zeros if there are none).
    """
    part.validate(g.n_nodes)
    n, p, c = g.n_nodes, part.p, g.n_classes
    x = g.features.astype(np.float64)
    virt = np.zeros((p + c, g.n_features), dtype=np.float64)
    counts = np.bincount(part.assignment, minlength=p)
    np.add.at(virt, part.assignment, x)
    virt[:p] /= counts[:, None]
    train = g.train_ids
    by_class = tuple(np.sort(train[g.labels[train] == k]) for k in range(c))
    for k, ids in enumerate(by_class):
        if len(ids):
            virt[p + k] = x[ids].mean(axis=0)
    return NodeUniverse(n, p, c, virt, np.asarray(part.assignment), by_class)


@dataclass(frozen=True, eq=False)
class AttentionRegion:
    """Query-disjoint block of a mask; ``entries`` index into the mask COO."""

    query_ids: np.ndarray
    key_ids: np.ndarray
    entries: np.ndarray
    mode: str = "auto"

    @property
    def nnz(self) -> int:
        return len(self.entries)

    @property
    def kappa(self) -> float:
        denom = len(self.query_ids) * len(self.key_ids)
        return self.nnz / denom if denom else 0.0


@dataclass(frozen=True, eq=False)
class SparseMask:
    """Binary attention pattern stored as row-major sorted COO pairs."""

    kind: str
    size: int
    rows: np.ndarray
    cols: np.ndarray
    layout: tuple = (0, 0, 0)
    regions: tuple = field(default=())

    @property
    def nnz(self) -> int:
        return len(self.rows)

    @property
    def kappa(self) -> float:
        return self.nnz / self.size**2 if self.size and self.nnz else 0.0

    @property
    def indptr(self) -> np.ndarray:
        ptr = np.zeros(self.size + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.rows, minlength=self.size), out=ptr[1:])
        return ptr

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.size, self.size), dtype=bool)
        out[self.rows, self.cols] = True
        return out

    def to_scipy(self) -> sp.csr_matrix:
        data = np.ones(self.nnz, dtype=np.int64)
        return sp.csr_matrix((data, (self.rows, self.cols)), shape=(self.size, self.size))

    def with_mode(self, mode: str) -> "SparseMask":
        """Copy with every region forced to ``mode``."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        return replace(self, regions=tuple(replace(r, mode=mode) for r in self.regions))

    def validate(self) -> "SparseMask":
        r, c = self.rows, self.cols
        if self.nnz:
            if r.min() < 0 or c.min() < 0 or r.max() >= self.size or c.max() >= self.size:
                raise ValueError("mask entry outside the universe")
            keys = r * self.size + c
            if np.any(np.diff(keys) <= 0):
                raise ValueError("mask entries must be sorted row-major and unique")
        seen = np.zeros(self.size, dtype=bool)
        covered = np.zeros(self.nnz, dtype=bool)
        for reg in self.regions:
            if np.any(seen[reg.query_ids]):
                raise ValueError("regions have overlapping query sets")
            seen[reg.query_ids] = True
            covered[reg.entries] = True
            if not np.all(np.isin(self.cols[reg.entries], reg.key_ids)):
                raise ValueError("region key set misses an entry column")
            if not np.all(np.isin(self.rows[reg.entries], reg.query_ids)):
                raise ValueError("region entries fall outside its query set")
        if self.regions and not covered.all():
            raise ValueError("regions do not cover every entry")
        return self


def make_mask(kind, size, rows, cols, layout=(0, 0, 0), regionized=True) -> SparseMask:
    """Sort and deduplicate (row, col) pairs into a :class:`SparseMask`."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    if len(rows):
        keys = np.unique(rows * size + cols)
        rows, cols = np.divmod(keys, size)
    mask = SparseMask(kind, int(size), rows, cols, tuple(int(x) for x in layout))
    return regionize(mask) if regionized else mask


def regionize(mask: SparseMask) -> SparseMask:
    """Split a mask into query-disjoint regions by node type.

    Rows with at least one entry are grouped by the layout segment they fall
    in (real, cluster virtual, global virtual); each group's key set is the
    union of its rows' columns, so a per-region softmax sees whole rows.
    """
    n_real, n_cluster, _ = mask.layout
    bounds = [0, n_real, n_real + n_cluster, mask.size]
    regions = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi <= lo:
            continue
        start, stop = np.searchsorted(mask.rows, [lo, hi])
        if stop <= start:
            continue
        entries = np.arange(start, stop)
        regions.append(
            AttentionRegion(
                query_ids=np.unique(mask.rows[start:stop]),
                key_ids=np.unique(mask.cols[start:stop]),
                entries=entries,
            )
        )
    out = replace(mask, regions=tuple(regions))
    _check_row_ownership(out)
    return out


def _check_row_ownership(mask: SparseMask):
    owner = np.full(mask.size, -1)
    for i, reg in enumerate(mask.regions):
        if np.any(owner[reg.query_ids] >= 0):
            raise RuntimeError("query row spans multiple regions")
        owner[reg.query_ids] = i
    if mask.nnz and np.any(owner[mask.rows] < 0):
        raise RuntimeError("mask row not owned by any region")


# ---------------------------------------------------------------------------
# Mask construction


def _check_universe(u: NodeUniverse, g: Graph, part: Partition):
    if u.n_real != g.n_nodes or u.n_cluster != part.p or u.n_global != g.n_classes:
        raise ValueError("universe does not match graph/partition")
    if not np.array_equal(u.assignment, part.assignment):
        raise ValueError("universe was built from a different partition")


def _local_pairs(g: Graph):
    src, dst = g.edge_array()
    loops = np.arange(g.n_nodes)
    return np.concatenate([src, loops]), np.concatenate([dst, loops])


def build_designed_masks(u: NodeUniverse, g: Graph, part: Partition):
    """Return the local, cluster and label-global masks ``(L2, C4, G3)``."""
    _check_universe(u, g, part)
    n, p, size = u.n_real, u.n_cluster, u.total
    layout = (u.n_real, u.n_cluster, u.n_global)
    real = np.arange(n)

    rows, cols = _local_pairs(g)
    m_l2 = make_mask("L2", size, rows, cols, layout)

    a = np.asarray(part.assignment)
    m_c4 = make_mask(
        "C4",
        size,
        np.concatenate([real, real, n + a]),
        np.concatenate([real, n + a, real]),
        layout,
    )

    rows_list = [np.repeat(real, u.n_global)]
    cols_list = [np.tile(u.global_ids, n)]
    for c, ids in enumerate(u.train_ids_by_class):
        # a class without training nodes leaves its row empty (zero attention output)
        rows_list.append(np.full(len(ids), n + p + c))
        cols_list.append(np.asarray(ids, dtype=np.int64))
    m_g3 = make_mask("G3", size, np.concatenate(rows_list), np.concatenate(cols_list), layout)
    return m_l2, m_c4, m_g3


def _boolean_power(g: Graph, k: int) -> sp.csr_matrix:
    n = g.n_nodes
    src, dst = _local_pairs(g)
    step = sp.csr_matrix((np.ones(len(src), dtype=np.int64), (src, dst)), shape=(n, n))
    step.data[:] = 1
    reach = step.copy()
    for _ in range(k - 1):
        reach = reach @ step
        reach.data[:] = 1
    reach.eliminate_zeros()
    return reach.tocoo()


def build_taxonomy_mask(
    u: NodeUniverse, g: Graph, part: Partition, kind: str, k_hops: int = 2, n_g2_virtual: int = 1
) -> SparseMask:
    """Masks of existing graph transformers, expressed over the universe.

    ``G2`` places its ``n_g2_virtual`` label-free virtual nodes in the global
    slots, so its universe has ``N + P + n_g2_virtual`` nodes.
    """
    if kind not in TAXONOMY_KINDS:
        raise ValueError(f"unsupported taxonomy mask kind {kind!r}; expected one of {TAXONOMY_KINDS}")
    _check_universe(u, g, part)
    n, p = u.n_real, u.n_cluster
    layout = (u.n_real, u.n_cluster, u.n_global)
    size = u.total
    a = np.asarray(part.assignment)

    if kind == "L1":
        if k_hops < 1:
            raise ValueError("k_hops must be >= 1")
        reach = _boolean_power(g, k_hops)
        rows, cols = reach.row, reach.col
    elif kind == "C1":
        ids = u.cluster_ids
        rows, cols = np.repeat(ids, p), np.tile(ids, p)
    elif kind == "C2":
        rows, cols = np.repeat(u.cluster_ids, n), np.tile(np.arange(n), p)
    elif kind == "C3":
        order = np.argsort(a, kind="stable")
        rows_l, cols_l = [], []
        for c in range(p):
            members = order[a[order] == c]
            rows_l.append(np.repeat(members, len(members)))
            cols_l.append(np.tile(members, len(members)))
        rows, cols = np.concatenate(rows_l), np.concatenate(cols_l)
    elif kind == "G1":
        rows, cols = np.repeat(np.arange(n), n), np.tile(np.arange(n), n)
    else:  # G2
        if n_g2_virtual < 1:
            raise ValueError("G2 needs at least one virtual node")
        vids = np.arange(n + p, n + p + n_g2_virtual)
        real = np.arange(n)
        rows = np.concatenate([np.repeat(real, n_g2_virtual), np.repeat(vids, n)])
        cols = np.concatenate([np.tile(vids, n), np.tile(real, n_g2_virtual)])
        size = n + p + n_g2_virtual
        layout = (n, p, n_g2_virtual)
    return make_mask(kind, size, rows, cols, layout)


def build_mask(u: NodeUniverse, g: Graph, part: Partition, kind: str, **kwargs) -> SparseMask:
    """Any of the nine kinds by name."""
    if kind in ("L2", "C4", "G3"):
        return dict(zip(("L2", "C4", "G3"), build_designed_masks(u, g, part)))[kind]
    return build_taxonomy_mask(u, g, part, kind, **kwargs)


def mask_stats(mask: SparseMask, d_head: int | None = None) -> dict:
    """nnz, global kappa and per-region kappa/mode.

    With ``d_head`` given, ``auto`` regions report the mode the dual scheme
    would pick.
    """
    from .attention import select_mode

    regions = []
    for reg in mask.regions:
        mode = reg.mode
        if d_head is not None:
            mode = select_mode(reg, d_head)
        regions.append(
            {
                "n_queries": int(len(reg.query_ids)),
                "n_keys": int(len(reg.key_ids)),
                "nnz": reg.nnz,
                "kappa": reg.kappa,
                "mode": mode,
            }
        )
    return {"kind": mask.kind, "size": mask.size, "nnz": mask.nnz, "kappa": mask.kappa, "regions": regions}


def export_mask(mask: SparseMask, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.tsv`` (row, col pairs) and a ``<prefix>.json`` sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    tsv = prefix.with_suffix(".tsv")
    side = prefix.with_suffix(".json")
    with tsv.open("w") as fh:
        fh.write("row\tcol\n")
        for r, c in zip(mask.rows.tolist(), mask.cols.tolist()):
            fh.write(f"{r}\t{c}\n")
    meta = {
        "kind": mask.kind,
        "size": mask.size,
        "layout": {"n_real": mask.layout[0], "n_cluster": mask.layout[1], "n_global": mask.layout[2]},
        "nnz": mask.nnz,
        "regions": [
            {
                "query_ids": reg.query_ids.tolist(),
                "key_ids": reg.key_ids.tolist(),
                "entry_start": int(reg.entries[0]) if reg.nnz else 0,
                "entry_stop": int(reg.entries[-1]) + 1 if reg.nnz else 0,
                "nnz": reg.nnz,
                "kappa": reg.kappa,
                "mode": reg.mode,
            }
            for reg in mask.regions
        ],
    }
    side.write_text(json.dumps(meta, indent=1))
    return tsv, side


def import_mask(prefix) -> SparseMask:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    data = np.loadtxt(prefix.with_suffix(".tsv"), dtype=np.int64, skiprows=1, ndmin=2)
    rows, cols = (data[:, 0], data[:, 1]) if data.size else (np.zeros(0, np.int64), np.zeros(0, np.int64))
    lay = meta["layout"]
    mask = make_mask(meta["kind"], meta["size"], rows, cols, (lay["n_real"], lay["n_cluster"], lay["n_global"]))
    modes = [r["mode"] for r in meta["regions"]]
    if len(modes) == len(mask.regions):
        mask = replace(mask, regions=tuple(replace(r, mode=m) for r, m in zip(mask.regions, modes)))
    return mask

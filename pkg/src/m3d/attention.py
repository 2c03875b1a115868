"""Masked multi-head attention in three interchangeable schemes.

* ``dense``: materialize the query x key score block, mask, softmax.
* ``sparse``: score only the mask entries, normalize with a scatter softmax.
* ``dual``: per query-disjoint region, pick whichever of the two needs fewer
  accounted value slots, then scatter the region outputs back by query id.

All three compute the same function of ``h``; they differ in cost only.
Cost is tracked in abstract *units* (buffer slots): a dense region holds
``2 * H * |Q| * |K|`` and a sparse region ``6 * H * nnz * d_head``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masks import AttentionRegion, SparseMask

KERNELS = ("softmax-dot", "gat-additive")
SCHEMES = ("dense", "sparse", "dual")


@dataclass
class MhaParams:
    """Projection weights and settings for one attention expert.

    ``w_q``, ``w_k``, ``w_v`` are ``d_model x d_model``; head ``i`` uses
    columns ``i * d_head : (i + 1) * d_head``. ``a_src``/``a_dst`` are
    ``n_heads x d_head`` and only used by the GAT-style kernel.
    """

    n_heads: int
    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor
    attention_dropout: float = 0.0
    kernel: str = "softmax-dot"
    a_src: T.Tensor | None = None
    a_dst: T.Tensor | None = None

    def __post_init__(self):
        d = self.d_model
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ValueError(f"d_model={d} is not divisible by n_heads={self.n_heads}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "gat-additive":
            if self.a_src is None or self.a_dst is None:
                raise ValueError("gat-additive kernel needs a_src and a_dst")
            for a in (self.a_src, self.a_dst):
                if a.shape != (self.n_heads, self.d_head):
                    raise ValueError(f"attention vectors must be {self.n_heads}x{self.d_head}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def score_scale(self) -> float:
        return 1.0 / np.sqrt(self.d_head)


@dataclass(frozen=True)
class MemoryEstimate:
    dense_units: int
    sparse_units: int
    mode: str

    @property
    def chosen_units(self) -> int:
        return self.dense_units if self.mode == "dense" else self.sparse_units


@dataclass
class UnitLedger:
    """Collects the :class:`MemoryEstimate` of every region evaluated."""

    records: list = field(default_factory=list)

    def add(self, est: MemoryEstimate):
        self.records.append(est)

    @property
    def total(self) -> int:
        return sum(r.chosen_units for r in self.records)


@dataclass(frozen=True)
class DropoutSpec:
    """Per-entry attention dropout, keyed by the canonical mask entry.

    ``uniforms`` has one row per mask entry and one column per head, so the
    dropped entries do not depend on which scheme evaluates them.
    """

    p: float
    uniforms: np.ndarray

    @classmethod
    def draw(cls, mask: SparseMask, n_heads: int, p: float, key: tuple):
        return cls(p, T.counter_rng(*key).random((mask.nnz, n_heads)))


def select_mode(region: AttentionRegion, d_head: int) -> str:
    """Sparse iff kappa < 1 / (3 d_head); a forced region mode wins."""
    if region.mode != "auto":
        return region.mode
    return "sparse" if region.kappa * 3 * d_head < 1 else "dense"


def memory_footprint(region: AttentionRegion, mode: str, n_heads: int, d_head: int) -> MemoryEstimate:
    if mode == "auto":
        mode = select_mode(region, d_head)
    dense = 2 * n_heads * len(region.query_ids) * len(region.key_ids)
    sparse = 6 * n_heads * region.nnz * d_head
    return MemoryEstimate(int(dense), int(sparse), mode)


def whole_mask_region(mask: SparseMask, mode: str = "auto") -> AttentionRegion:
    """The entire mask as a single ``size x size`` region."""
    ids = np.arange(mask.size)
    return AttentionRegion(ids, ids, np.arange(mask.nnz), mode)


def _project(h, params):
    return (
        T.matmul(h, params.w_q),
        T.matmul(h, params.w_k),
        T.matmul(h, params.w_v),
    )


def _split_heads(x, n_heads):
    """``[n, H*dh] -> [H, n, dh]``."""
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def _merge_heads(x):
    """``[H, n, dh] -> [n, H*dh]``."""
    h, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


def _local_positions(ids, values):
    pos = np.searchsorted(ids, values)
    if np.any(pos >= len(ids)) or np.any(ids[np.minimum(pos, len(ids) - 1)] != values):
        raise ValueError("region entry lies outside its query/key set")
    return pos


def _check_ids(ids, n):
    if len(ids) and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"node id outside [0, {n})")


def _dense_region(proj, mask, region, params, dropout):
    q, k, v = proj
    n_heads = params.n_heads
    qids, kids = region.query_ids, region.key_ids
    rows = _local_positions(qids, mask.rows[region.entries])
    cols = _local_positions(kids, mask.cols[region.entries])
    pattern = np.zeros((len(qids), len(kids)), dtype=bool)
    pattern[rows, cols] = True
    qh = _split_heads(T.gather_rows(q, qids), n_heads)
    kh = _split_heads(T.gather_rows(k, kids), n_heads)
    vh = _split_heads(T.gather_rows(v, kids), n_heads)
    scores = T.mul_scalar(T.matmul(qh, kh, transpose_b=True), params.score_scale)
    weights = T.row_softmax_masked(scores, pattern)
    if dropout is not None and dropout.p > 0:
        grid = np.ones((n_heads, len(qids), len(kids)))
        grid[:, rows, cols] = dropout.uniforms[region.entries].T
        weights = T.dropout(weights, dropout.p, uniforms=grid)
    return _merge_heads(T.matmul(weights, vh))


def _sparse_region(proj, mask, region, params, dropout):
    q, k, v = proj
    n_heads, dh = params.n_heads, params.d_head
    rows = mask.rows[region.entries]
    cols = mask.cols[region.entries]
    local_rows = _local_positions(region.query_ids, rows)
    m = len(rows)
    if params.kernel == "gat-additive":
        vr = T.reshape(T.gather_rows(v, rows), (m, n_heads, dh))
        vc = T.reshape(T.gather_rows(v, cols), (m, n_heads, dh))
        logits = T.add(T.sum_last(T.mul(vr, params.a_src)), T.sum_last(T.mul(vc, params.a_dst)))
        scores = T.leaky_relu(logits, 0.2)
    else:
        qe = T.reshape(T.gather_rows(q, rows), (m, n_heads, dh))
        ke = T.reshape(T.gather_rows(k, cols), (m, n_heads, dh))
        scores = T.mul_scalar(T.sum_last(T.mul(qe, ke)), params.score_scale)
    weights = T.scatter_row_softmax(scores, local_rows, len(region.query_ids))
    if dropout is not None and dropout.p > 0:
        weights = T.dropout(weights, dropout.p, uniforms=dropout.uniforms[region.entries])
    ve = T.reshape(T.gather_rows(v, cols), (m, n_heads, dh))
    msg = T.mul(T.reshape(weights, (m, n_heads, 1)), ve)
    return T.scatter_add_rows(T.reshape(msg, (m, n_heads * dh)), local_rows, len(region.query_ids))


def _run_regions(h, mask, regions, params, dropout, ledger, forced=None):
    h = T.as_tensor(h)
    if h.shape[0] != mask.size:
        raise ValueError(f"input has {h.shape[0]} rows, mask expects {mask.size}")
    if params.kernel == "gat-additive" and forced == "dense":
        raise ValueError("the gat-additive kernel has no dense path")
    proj = _project(h, params)
    out = None
    owner = np.zeros(mask.size, dtype=bool)
    for region in regions:
        _check_ids(region.query_ids, mask.size)
        _check_ids(region.key_ids, mask.size)
        if np.any(owner[region.query_ids]):
            raise ValueError("regions have overlapping query sets")
        owner[region.query_ids] = True
        mode = forced or select_mode(region, params.d_head)
        if params.kernel == "gat-additive":
            mode = "sparse"
        if ledger is not None:
            ledger.add(memory_footprint(region, mode, params.n_heads, params.d_head))
        run = _dense_region if mode == "dense" else _sparse_region
        part = T.scatter_add_rows(run(proj, mask, region, params, dropout), region.query_ids, mask.size)
        out = part if out is None else T.add(out, part)
    if out is None:
        # no entries at all: a zero output that still belongs to the graph
        out = T.mul_scalar(proj[2], 0.0)
    return out


def _check_sorted(mask: SparseMask):
    if mask.nnz:
        keys = mask.rows * mask.size + mask.cols
        if np.any(np.diff(keys) <= 0):
            raise ValueError("mask entries must be sorted row-major and unique")
        if mask.rows.max() >= mask.size or mask.cols.max() >= mask.size or min(mask.rows.min(), mask.cols.min()) < 0:
            raise IndexError("mask entry outside the universe")


def dense_masked_mha(h, mask: SparseMask, params: MhaParams, region=None, dropout=None, ledger=None):
    """Dense attention over ``region`` (default: the whole mask as one block)."""
    _check_sorted(mask)
    region = whole_mask_region(mask) if region is None else region
    return _run_regions(h, mask, [region], params, dropout, ledger, forced="dense")


def sparse_mha(h, mask: SparseMask, params: MhaParams, dropout=None, ledger=None):
    """Per-entry attention over every mask entry."""
    _check_sorted(mask)
    return _run_regions(h, mask, [whole_mask_region(mask)], params, dropout, ledger, forced="sparse")


def dual_mha(h, mask: SparseMask, params: MhaParams, dropout=None, ledger=None):
    """Region-wise attention; each region runs in its selected mode."""
    _check_sorted(mask)
    if not mask.regions and mask.nnz:
        raise ValueError("dual scheme needs a regionized mask")
    return _run_regions(h, mask, mask.regions, params, dropout, ledger)


def masked_mha(h, mask: SparseMask, params: MhaParams, scheme: str = "dual", dropout=None, ledger=None):
    if scheme == "dense":
        return dense_masked_mha(h, mask, params, dropout=dropout, ledger=ledger)
    if scheme == "sparse":
        return sparse_mha(h, mask, params, dropout=dropout, ledger=ledger)
    if scheme == "dual":
        return dual_mha(h, mask, params, dropout=dropout, ledger=ledger)
    raise ValueError(f"unknown scheme {scheme!r}")


def scheme_units(mask: SparseMask, n_heads: int, d_head: int, scheme: str) -> int:
    """Accounted units one attention call would allocate under ``scheme``."""
    if scheme == "dual":
        return sum(memory_footprint(r, "auto", n_heads, d_head).chosen_units for r in mask.regions)
    return memory_footprint(whole_mask_region(mask), scheme, n_heads, d_head).chosen_units


def attention_weights(h, mask: SparseMask, params: MhaParams) -> np.ndarray:
    """Per-entry, per-head normalized weights (``nnz x H``), eval mode."""
    h = T.as_tensor(h)
    q, k, v = (p.data for p in _project(h, params))
    n_heads, dh = params.n_heads, params.d_head
    qe = q[mask.rows].reshape(-1, n_heads, dh)
    ke = k[mask.cols].reshape(-1, n_heads, dh)
    if params.kernel == "gat-additive":
        vr = v[mask.rows].reshape(-1, n_heads, dh)
        vc = v[mask.cols].reshape(-1, n_heads, dh)
        scores = T.leaky_relu((vr * params.a_src.data).sum(-1) + (vc * params.a_dst.data).sum(-1), 0.2).data
    else:
        scores = (qe * ke).sum(-1) * params.score_scale
    return T.scatter_row_softmax(scores, mask.rows, mask.size).data

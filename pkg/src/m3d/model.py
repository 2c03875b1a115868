"""Hierarchical-mask graph transformer with bi-level expert routing.

Each layer normalizes its input, runs three attention experts over the
local, cluster and global masks, and mixes them per node with two sigmoid
gates::

    g_local   = b1
    g_cluster = (1 - b1) * b2
    g_global  = (1 - b1) * (1 - b2)

followed by ReLU and a learned residual projection. Virtual nodes (cluster
and label) are ordinary rows of the hidden state in every layer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from ._validation import check_choice, check_positive_int, check_probability
from .attention import KERNELS, SCHEMES, DropoutSpec, MhaParams, masked_mha
from .masks import NodeUniverse, SparseMask

EXPERTS = ("local", "cluster", "global")
FFN_KINDS = ("none", "standard")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and run settings.

    ``forced_gates`` pins the per-node mixture to a constant triple (used to
    build single-expert ablations); experts with a forced weight of zero are
    not evaluated at all.
    """

    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    dropout: float = 0.0
    attention_dropout: float = 0.0
    local_kernel: str = "softmax-dot"
    norm: str = "pre-rmsnorm"
    activation: str = "relu"
    ffn: str = "none"
    n_clusters: int = 6
    scheme: str = "dual"
    forced_gates: tuple | None = None
    seed: int = 0

    def validate(self) -> "ModelConfig":
        check_positive_int(self.n_layers, "n_layers")
        check_positive_int(self.d_model, "d_model")
        check_positive_int(self.n_heads, "n_heads")
        check_positive_int(self.n_clusters, "n_clusters")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        check_probability(self.dropout, "dropout")
        check_probability(self.attention_dropout, "attention_dropout")
        check_choice(self.local_kernel, "local_kernel", KERNELS)
        check_choice(self.norm, "norm", ("pre-rmsnorm",))
        check_choice(self.activation, "activation", ("relu",))
        check_choice(self.ffn, "ffn", FFN_KINDS)
        check_choice(self.scheme, "scheme", SCHEMES)
        if self.local_kernel == "gat-additive" and self.scheme == "dense":
            raise ValueError("the gat-additive kernel has no dense path")
        if self.forced_gates is not None:
            gates = np.asarray(self.forced_gates, dtype=float)
            if gates.shape != (3,) or np.any(gates < 0) or abs(gates.sum() - 1) > 1e-12:
                raise ValueError(f"forced_gates must be 3 nonnegative weights summing to 1, got {self.forced_gates}")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("forced_gates") is not None:
            d["forced_gates"] = tuple(float(x) for x in d["forced_gates"])
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RoutingGates:
    beta1: np.ndarray
    beta2: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray

    def stacked(self) -> np.ndarray:
        """``n x 3`` array of (local, cluster, global) weights."""
        return np.stack([self.g1, self.g2, self.g3], axis=1)


def declare_parameters(cfg: ModelConfig, n_features: int, n_classes: int, dtype=np.float32) -> T.ParameterStore:
    d = cfg.d_model
    store = T.ParameterStore(dtype)
    store.declare("w_in", (n_features, d), "glorot")
    for layer in range(cfg.n_layers):
        pre = f"layer{layer}."
        store.declare(pre + "norm", (d,), "ones")
        for e in EXPERTS:
            for w in ("w_q", "w_k", "w_v"):
                store.declare(f"{pre}{e}.{w}", (d, d), "glorot")
        if cfg.local_kernel == "gat-additive":
            store.declare(pre + "local.a_src", (cfg.n_heads, cfg.d_head), "glorot")
            store.declare(pre + "local.a_dst", (cfg.n_heads, cfg.d_head), "glorot")
        store.declare(pre + "gate1", (d, 1), "zeros")
        store.declare(pre + "gate2", (d, 1), "zeros")
        store.declare(pre + "w_res", (d, d), "identity")
        if cfg.ffn == "standard":
            store.declare(pre + "ffn.norm", (d,), "ones")
            store.declare(pre + "ffn.w1", (d, 4 * d), "glorot")
            store.declare(pre + "ffn.w2", (4 * d, d), "glorot")
    store.declare("w_cls", (d, n_classes), "glorot")
    return store


def init_parameters(cfg: ModelConfig, n_features: int, n_classes: int, dtype=np.float32) -> T.ParameterStore:
    return declare_parameters(cfg, n_features, n_classes, dtype).initialize(cfg.seed)


def _one_minus(x: T.Tensor) -> T.Tensor:
    return T.add(T.mul_scalar(x, -1.0), np.ones(1, dtype=x.dtype))


def gate_tensors(h, w_g1, w_g2):
    """Differentiable (b1, b2, g1, g2, g3), each ``n x 1``."""
    h = T.as_tensor(h)
    d = h.shape[-1]
    for w in (w_g1, w_g2):
        if tuple(w.shape) != (d, 1):
            raise ValueError(f"gate weights must be {d}x1, got {tuple(w.shape)}")
    b1 = T.sigmoid(T.matmul(h, w_g1))
    b2 = T.sigmoid(T.matmul(h, w_g2))
    rest = _one_minus(b1)
    return b1, b2, b1, T.mul(rest, b2), T.mul(rest, _one_minus(b2))


def routing_gates(h, w_g1, w_g2) -> RoutingGates:
    b1, b2, g1, g2, g3 = gate_tensors(T.as_tensor(h), T.as_tensor(w_g1), T.as_tensor(w_g2))
    return RoutingGates(*(t.data[:, 0].copy() for t in (b1, b2, g1, g2, g3)))


def expert_params(store: T.ParameterStore, cfg: ModelConfig, layer: int, expert: str) -> MhaParams:
    pre = f"layer{layer}.{expert}."
    kernel = cfg.local_kernel if expert == "local" else "softmax-dot"
    extra = {}
    if kernel == "gat-additive":
        extra = {"a_src": store[pre + "a_src"], "a_dst": store[pre + "a_dst"]}
    return MhaParams(
        cfg.n_heads,
        store[pre + "w_q"],
        store[pre + "w_k"],
        store[pre + "w_v"],
        attention_dropout=cfg.attention_dropout,
        kernel=kernel,
        **extra,
    )


@dataclass
class ForwardContext:
    """Run-time knobs for one forward pass."""

    training: bool = False
    step: int = 0
    scheme: str | None = None
    ledger: object = None
    record_gates: bool = False
    gates: list | None = None


def layer_forward(h_prev, masks, store: T.ParameterStore, cfg: ModelConfig, layer: int, ctx: ForwardContext | None = None):
    """One layer: ``relu(mix(experts(norm(h)))) + h @ w_res`` (+ optional FFN)."""
    ctx = ctx or ForwardContext()
    h_prev = T.as_tensor(h_prev)
    for m in masks:
        if m.size != h_prev.shape[0]:
            raise ValueError(f"mask {m.kind} has size {m.size}, hidden state has {h_prev.shape[0]} rows")
    pre = f"layer{layer}."
    x = T.rmsnorm(h_prev, store[pre + "norm"])
    if cfg.forced_gates is None:
        b1, b2, g1, g2, g3 = gate_tensors(x, store[pre + "gate1"], store[pre + "gate2"])
        gates = (g1, g2, g3)
        if ctx.record_gates:
            ctx.gates.append(np.concatenate([g.data for g in gates], axis=1))
    else:
        gates = tuple(float(v) for v in cfg.forced_gates)
        if ctx.record_gates:
            ctx.gates.append(np.tile(np.asarray(gates, dtype=x.dtype), (x.shape[0], 1)))
    scheme = ctx.scheme or cfg.scheme
    mixture = None
    for e_idx, (expert, mask, gate) in enumerate(zip(EXPERTS, masks, gates)):
        if isinstance(gate, float) and gate == 0.0:
            continue
        params = expert_params(store, cfg, layer, expert)
        drop = None
        if ctx.training and cfg.attention_dropout > 0:
            drop = DropoutSpec.draw(mask, cfg.n_heads, cfg.attention_dropout, (cfg.seed, "attn", ctx.step, layer, e_idx))
        out = masked_mha(x, mask, params, scheme=scheme, dropout=drop, ledger=ctx.ledger)
        term = T.mul_scalar(out, gate) if isinstance(gate, float) else T.mul(gate, out)
        mixture = term if mixture is None else T.add(mixture, term)
    h = T.add(T.relu(mixture), T.matmul(h_prev, store[pre + "w_res"]))
    if cfg.ffn == "standard":
        y = T.rmsnorm(h, store[pre + "ffn.norm"])
        y = T.matmul(T.relu(T.matmul(y, store[pre + "ffn.w1"])), store[pre + "ffn.w2"])
        h = T.add(h, y)
    if ctx.training and cfg.dropout > 0:
        h = T.dropout(h, cfg.dropout, key=(cfg.seed, "hidden", ctx.step, layer))
    return h


def model_forward(features, masks, store: T.ParameterStore, cfg: ModelConfig, ctx: ForwardContext | None = None):
    """Logits for every universe row (real, cluster virtual, label virtual)."""
    ctx = ctx or ForwardContext()
    if len(store) == 0:
        raise T.PreconditionError("parameters are not initialized")
    if ctx.record_gates and ctx.gates is None:
        ctx.gates = []
    x = T.Tensor(np.asarray(features, dtype=store.dtype))
    h = T.matmul(x, store["w_in"])
    if ctx.training and cfg.dropout > 0:
        h = T.dropout(h, cfg.dropout, key=(cfg.seed, "input", ctx.step))
    for layer in range(cfg.n_layers):
        h = layer_forward(h, masks, store, cfg, layer, ctx)
    return T.matmul(h, store["w_cls"])


def loss_targets(labels, train_ids, global_ids, global_labels):
    """Row ids and targets of the loss set: training nodes plus label virtuals."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    global_ids = np.asarray(global_ids, dtype=np.int64)
    ids = np.concatenate([train_ids, global_ids])
    targets = np.concatenate([np.asarray(labels)[train_ids], np.asarray(global_labels, dtype=np.int64)])
    if len(ids) == 0:
        raise ValueError("loss set is empty: no training nodes and no label virtual nodes")
    return ids, targets


def compute_loss(logits, labels, train_ids, global_ids=(), global_labels=()):
    """Mean cross-entropy over training nodes and label virtual nodes."""
    ids, targets = loss_targets(labels, train_ids, global_ids, global_labels)
    return T.cross_entropy_rows(logits, targets, ids)


def predict(logits, node_ids):
    """Softmax rows and argmax classes (ties go to the lowest class)."""
    z = np.asarray(logits.data if isinstance(logits, T.Tensor) else logits)[np.asarray(node_ids, dtype=np.int64)]
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    return np.argmax(prob, axis=1), prob


def universe_inputs(g, u: NodeUniverse):
    """Feature matrix over the universe and the loss index set."""
    return u.features(g), loss_targets(g.labels, g.train_ids, u.global_ids, u.global_labels)


def check_masks(masks, u: NodeUniverse):
    if len(masks) != 3:
        raise ValueError("expected three masks (local, cluster, global)")
    for m in masks:
        if not isinstance(m, SparseMask):
            raise TypeError(f"expected SparseMask, got {type(m).__name__}")
    if masks[0].size != u.total or masks[1].size != u.total or masks[2].size != u.total:
        raise ValueError("mask sizes must equal the universe size")
    return masks

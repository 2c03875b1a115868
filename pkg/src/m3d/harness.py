"""Training, evaluation, ensembles, gate profiling and scheme benchmarks."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from ._validation import check_choice, check_positive_int
from .attention import SCHEMES, UnitLedger, scheme_units
from .graph import SPLIT_NAMES, Graph, SbmConfig, generate_hierarchical_sbm
from .masks import NodeUniverse, build_designed_masks, extend_universe
from .model import (
    EXPERTS,
    ForwardContext,
    ModelConfig,
    check_masks,
    declare_parameters,
    init_parameters,
    model_forward,
    predict,
    universe_inputs,
)
from .partition import partition_graph

METRICS = ("accuracy", "roc_auc")


class TrainingDivergence(RuntimeError):
    """The training loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int | None = 50
    metric: str = "accuracy"
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> "TrainConfig":
        check_positive_int(self.epochs, "epochs")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid Adam hyperparameters")
        if self.patience is not None:
            check_positive_int(self.patience, "patience")
        check_choice(self.metric, "metric", METRICS)
        check_choice(self.dtype, "dtype", ("float32", "float64"))
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


class AdamW:
    """Adam with decoupled weight decay: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""

    def __init__(self, lr=0.01, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: T.ParameterStore):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= self.lr * update


# ---------------------------------------------------------------------------
# Metrics


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(pred == labels))


def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC; tied scores share their average rank."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) > 2 or not np.all(np.isin(classes, (0, 1))):
        raise ValueError("roc_auc needs binary 0/1 labels")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def split_score(prob, labels, metric: str) -> float:
    if metric == "roc_auc":
        if prob.shape[1] != 2:
            raise ValueError("roc_auc needs a binary task")
        return roc_auc(prob[:, 1], labels)
    return accuracy(np.argmax(prob, axis=1), labels)


def _split_loss(prob, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    p = prob[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, np.finfo(prob.dtype).tiny))))


def ensemble_combine(prob_matrices, strategy: str, labels) -> float:
    """Accuracy of a Mean / Max / Oracle combination of per-model probabilities."""
    probs = [np.asarray(p, dtype=float) for p in prob_matrices]
    labels = np.asarray(labels)
    if len(probs) < 2:
        raise ValueError("an ensemble needs at least two models")
    if any(p.shape != probs[0].shape for p in probs) or probs[0].shape[0] != len(labels):
        raise ValueError("probability matrices and labels must share their shape")
    stack = np.stack(probs)
    if strategy == "mean":
        return accuracy(np.argmax(stack.mean(axis=0), axis=1), labels)
    if strategy == "max":
        return accuracy(np.argmax(stack.max(axis=0), axis=1), labels)
    if strategy == "oracle":
        hits = np.argmax(stack, axis=2) == labels[None, :]
        return float(np.mean(hits.any(axis=0)))
    raise ValueError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# Training


@dataclass
class RunRecord:
    """Per-epoch losses/metrics plus the validation-selected best epoch."""

    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid: float = -math.inf
    checkpoint: str | None = None
    wall_time: float = 0.0
    peak_units: int = 0

    def history(self, split: str) -> np.ndarray:
        return np.array([[r[2], r[3]] for r in self.rows if r[1] == split])

    def best_metric(self, split: str) -> float:
        for epoch, s, _, metric in self.rows:
            if epoch == self.best_epoch and s == split:
                return metric
        raise KeyError(f"no record for split {split!r} at epoch {self.best_epoch}")

    def to_tsv(self, path) -> Path:
        """Deterministic report; wall time is left out on purpose."""
        path = Path(path)
        with path.open("w") as fh:
            fh.write("epoch\tsplit\tloss\tmetric\n")
            for epoch, split, loss, metric in self.rows:
                fh.write(f"{epoch}\t{split}\t{loss!r}\t{metric!r}\n")
        return path

    def __eq__(self, other):
        if not isinstance(other, RunRecord):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.best_epoch == other.best_epoch
            and self.peak_units == other.peak_units
        )


@dataclass
class TrainedModel:
    store: T.ParameterStore
    config: ModelConfig
    record: RunRecord
    n_features: int
    n_classes: int


def _eval_probs(logits, g: Graph):
    real = np.arange(g.n_nodes)
    return predict(logits, real)[1]


def _record_epoch(record, epoch, prob, g, metric):
    scores = {}
    for code, split in enumerate(SPLIT_NAMES):
        ids = g.ids_in_split(code)
        labels = g.labels[ids]
        score = split_score(prob[ids], labels, metric) if len(ids) else float("nan")
        record.rows.append((epoch, split, _split_loss(prob[ids], labels), score))
        scores[split] = score
    return scores


def train(
    g: Graph,
    u: NodeUniverse,
    masks,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint=None,
    on_epoch=None,
) -> TrainedModel:
    """Full-graph AdamW training with validation-based model selection.

    ``on_epoch(epoch, gates)`` is called after every optimizer step with the
    per-layer gate arrays of that step's forward pass.
    """
    model_cfg.validate()
    train_cfg.validate()
    check_masks(masks, u)
    dtype = np.dtype(train_cfg.dtype)
    store = init_parameters(model_cfg, g.n_features, g.n_classes, dtype)
    opt = AdamW(train_cfg.learning_rate, train_cfg.weight_decay, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    features, (ids, targets) = universe_inputs(g, u)
    stochastic = model_cfg.dropout > 0 or model_cfg.attention_dropout > 0
    record = RunRecord()
    best_state = store.state_dict()
    start = time.perf_counter()

    def forward(step, training):
        ctx = ForwardContext(training=training, step=step, ledger=UnitLedger(), record_gates=on_epoch is not None)
        return model_forward(features, masks, store, model_cfg, ctx), ctx

    logits, ctx = forward(1, True)
    for epoch in range(1, train_cfg.epochs + 1):
        record.peak_units = max(record.peak_units, ctx.ledger.total)
        store.zero_grad()
        loss = T.cross_entropy_rows(logits, targets, ids)
        if not np.isfinite(loss.data):
            raise TrainingDivergence(f"non-finite training loss at epoch {epoch}")
        loss.backward()
        opt.step(store)
        if on_epoch is not None:
            on_epoch(epoch, ctx.gates)
        more = epoch < train_cfg.epochs
        if more and not stochastic:
            logits, ctx = forward(epoch + 1, True)
            eval_logits = logits
        else:
            eval_logits, _ = forward(epoch, False)
            if more:
                logits, ctx = forward(epoch + 1, True)
        scores = _record_epoch(record, epoch, _eval_probs(eval_logits.data, g), g, train_cfg.metric)
        valid = scores["valid"]
        if np.isnan(valid):
            valid = scores["train"]
        if valid > record.best_valid:
            record.best_valid = valid
            record.best_epoch = epoch
            best_state = store.state_dict()
        if train_cfg.patience is not None and epoch - record.best_epoch >= train_cfg.patience:
            break
    record.wall_time = time.perf_counter() - start
    store.load_state_dict(best_state)
    result = TrainedModel(store, model_cfg, record, g.n_features, g.n_classes)
    if checkpoint is not None:
        save_model(result, checkpoint, train_cfg)
        record.checkpoint = str(checkpoint)
    return result


def save_model(model: TrainedModel, path, train_cfg: TrainConfig | None = None) -> Path:
    meta = {
        "model_config": asdict(model.config),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "best_epoch": model.record.best_epoch,
    }
    return T.save_checkpoint(path, model.store.state_dict(), meta)


def load_model(path) -> tuple[T.ParameterStore, ModelConfig]:
    state, meta = T.load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    dtype = next(iter(state.values())).dtype if state else np.float32
    store = declare_parameters(cfg, meta["n_features"], meta["n_classes"], dtype.newbyteorder("="))
    return store.load_state_dict(state), cfg


def predict_proba(store, cfg, g: Graph, u: NodeUniverse, masks) -> np.ndarray:
    features = u.features(g)
    logits = model_forward(features, masks, store, cfg, ForwardContext(training=False))
    return _eval_probs(logits.data, g)


def evaluate(checkpoint, g: Graph, u: NodeUniverse, masks, split="test", metric="accuracy") -> float:
    check_choice(metric, "metric", METRICS)
    store, cfg = load_model(checkpoint) if not isinstance(checkpoint, tuple) else checkpoint
    prob = predict_proba(store, cfg, g, u, masks)
    code = SPLIT_NAMES.index(split) if isinstance(split, str) else int(split)
    ids = g.ids_in_split(code)
    return split_score(prob[ids], g.labels[ids], metric)


# ---------------------------------------------------------------------------
# Gate profiles


def parse_degree_bins(text: str) -> list[tuple[int, float]]:
    """``"0-2,3-8,9+"`` -> ``[(0, 2), (3, 8), (9, inf)]`` (inclusive bounds)."""
    bins = []
    for token in text.split(","):
        token = token.strip()
        if token.endswith("+"):
            bins.append((int(token[:-1]), math.inf))
        elif "-" in token:
            lo, hi = token.split("-")
            bins.append((int(lo), int(hi)))
        else:
            bins.append((int(token), int(token)))
    for lo, hi in bins:
        if hi < lo:
            raise ValueError(f"empty degree bin {lo}-{hi}")
    return bins


def _bin_label(lo, hi):
    return f"{lo}+" if hi == math.inf else f"{lo}-{hi}"


def gate_profile(store, cfg: ModelConfig, g: Graph, u: NodeUniverse, masks, degree_bins) -> list[tuple]:
    """Rows ``(layer, bin, n_nodes, g_local, g_cluster, g_global)``; empty bins are omitted."""
    ctx = ForwardContext(training=False, record_gates=True)
    model_forward(u.features(g), masks, store, cfg, ctx)
    degree = g.out_degree()
    rows = []
    for layer, gates in enumerate(ctx.gates):
        real = gates[: g.n_nodes]
        for lo, hi in degree_bins:
            sel = (degree >= lo) & (degree <= hi)
            if not sel.any():
                continue
            mean = real[sel].astype(np.float64).mean(axis=0)
            rows.append((layer, _bin_label(lo, hi), int(sel.sum()), *(float(x) for x in mean)))
    return rows


def write_tsv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(repr(x) if isinstance(x, float) else str(x) for x in row) + "\n")
    return path


# ---------------------------------------------------------------------------
# Benchmarks


@dataclass(frozen=True)
class BenchmarkResult:
    scheme: str
    median_seconds: float
    peak_units: int
    oom: bool


def predicted_units(masks, cfg: ModelConfig, scheme: str) -> int:
    """Accounted units of one forward pass (buffers kept for backward)."""
    per_layer = sum(scheme_units(m, cfg.n_heads, cfg.d_head, scheme) for m in masks)
    return cfg.n_layers * per_layer


def benchmark_schemes(
    g: Graph, u: NodeUniverse, masks, model_cfg: ModelConfig, scheme: str, repeats: int = 3, unit_cap=None
) -> BenchmarkResult:
    """Median forward+backward time and accounted peak for one scheme."""
    check_choice(scheme, "scheme", SCHEMES)
    check_positive_int(repeats, "repeats")
    cfg = replace(model_cfg, scheme=scheme, dropout=0.0, attention_dropout=0.0).validate()
    units = predicted_units(masks, cfg, scheme)
    if unit_cap is not None and units > unit_cap:
        return BenchmarkResult(scheme, math.nan, units, True)
    store = init_parameters(cfg, g.n_features, g.n_classes)
    features, (ids, targets) = universe_inputs(g, u)
    times, peak = [], 0
    for step in range(repeats):
        ctx = ForwardContext(training=True, step=step, ledger=UnitLedger())
        t0 = time.perf_counter()
        store.zero_grad()
        T.cross_entropy_rows(model_forward(features, masks, store, cfg, ctx), targets, ids).backward()
        times.append(time.perf_counter() - t0)
        peak = max(peak, ctx.ledger.total)
    return BenchmarkResult(scheme, float(np.median(times)), peak, False)


# ---------------------------------------------------------------------------
# Single-expert ensemble study

SINGLE_EXPERT_GATES = {
    "local": (1.0, 0.0, 0.0),
    "cluster": (0.0, 1.0, 0.0),
    "global": (0.0, 0.0, 1.0),
}


def prepare_instance(g: Graph, n_clusters: int, seed: int = 0):
    part = partition_graph(g, n_clusters, seed=seed)
    u = extend_universe(g, part)
    return part, u, build_designed_masks(u, g, part)


def ensemble_study(g: Graph, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None, seed: int = 0) -> dict:
    """Train the three single-expert models and the full model on one graph.

    Returns test accuracies keyed by model name and by ensemble strategy.
    With ``out_dir`` set, checkpoints, run records and ``ensemble.tsv`` are
    written there.
    """
    part, u, masks = prepare_instance(g, model_cfg.n_clusters, seed)
    out = Path(out_dir) if out_dir is not None else None
    test = g.ids_in_split("test")
    labels = g.labels[test]
    results, probs = {}, []
    for name, gates in [*SINGLE_EXPERT_GATES.items(), ("full", None)]:
        cfg = replace(model_cfg, forced_gates=gates)
        ckpt = out / f"{name}.ckpt" if out is not None else None
        model = train(g, u, masks, cfg, train_cfg, checkpoint=ckpt)
        if out is not None:
            model.record.to_tsv(out / f"{name}.runrecord.tsv")
        prob = predict_proba(model.store, cfg, g, u, masks)[test]
        results[name] = accuracy(np.argmax(prob, axis=1), labels)
        if gates is not None:
            probs.append(prob)
    for strategy in ("mean", "max", "oracle"):
        results[strategy] = ensemble_combine(probs, strategy, labels)
    if out is not None:
        write_tsv(out / "ensemble.tsv", ("model", "test_accuracy"), [(k, float(v)) for k, v in results.items()])
    return results


# Block model for the ensemble study: 3 classes x 2 clusters x 200 nodes.
# Noisy features and cross-cluster edges make each context only partly
# informative, so the experts disagree on a sizable share of nodes.
STUDY_SBM = dict(
    n_classes=3,
    clusters_per_class=2,
    nodes_per_cluster=200,
    minority_fraction=0.15,
    feature_sigma=0.8,
    p_intra=0.05,
    p_cross_same=0.01,
    p_cross_diff=0.007,
)
STUDY_MODEL = dict(n_layers=4, d_model=32, n_heads=4, n_clusters=6)
STUDY_TRAIN = dict(epochs=200, learning_rate=0.01, weight_decay=5e-4, patience=50)


def sbm_for_study(seed: int, **overrides) -> Graph:
    """The block model used by the ensemble study, with optional overrides."""
    cfg = SbmConfig(**{**STUDY_SBM, **overrides, "seed": seed})
    return generate_hierarchical_sbm(cfg)


def study_configs(seed: int = 0) -> tuple[ModelConfig, TrainConfig]:
    """Shared model and training settings of the ensemble study."""
    return ModelConfig(**STUDY_MODEL, seed=seed).validate(), TrainConfig(**STUDY_TRAIN, seed=seed).validate()


def dump_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


__all__ = [
    "AdamW",
    "BenchmarkResult",
    "EXPERTS",
    "RunRecord",
    "TrainConfig",
    "TrainedModel",
    "TrainingDivergence",
    "accuracy",
    "benchmark_schemes",
    "ensemble_combine",
    "ensemble_study",
    "study_configs",
    "STUDY_SBM",
    "STUDY_MODEL",
    "STUDY_TRAIN",
    "sbm_for_study",
    "evaluate",
    "gate_profile",
    "load_model",
    "parse_degree_bins",
    "predict_proba",
    "roc_auc",
    "save_model",
    "train",
]

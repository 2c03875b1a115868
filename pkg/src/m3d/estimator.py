"""scikit-learn style wrapper: ``M3DClassifier().fit(graph).predict(graph)``."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_graph
from .graph import SPLIT_NAMES, Graph
from .harness import TrainConfig, accuracy, predict_proba, prepare_instance, train
from .model import ModelConfig


class M3DClassifier(ClassifierMixin, BaseEstimator):
    """Transductive node classifier over local, cluster and global masks.

    ``fit`` partitions the graph, appends cluster and label virtual nodes,
    builds the three masks and trains with validation-based selection.
    Prediction on another graph repeats the preprocessing on that graph
    with the fitted parameters.

    Parameters
    ----------
    n_layers, d_model, n_heads : int
        Network shape; ``d_model`` must be divisible by ``n_heads``.
    n_clusters : int
        Number of partitions (cluster virtual nodes).
    forced_gates : tuple of 3 floats, optional
        Pin the expert mixture, e.g. ``(1, 0, 0)`` for a local-only model.
    epochs, learning_rate, weight_decay, patience :
        Optimizer settings; ``patience=None`` trains all epochs.
    random_state : int
        Seeds parameter init, partitioning and dropout streams.
    """

    def __init__(
        self,
        n_layers=2,
        d_model=32,
        n_heads=4,
        n_clusters=6,
        dropout=0.0,
        attention_dropout=0.0,
        local_kernel="softmax-dot",
        ffn="none",
        scheme="dual",
        forced_gates=None,
        epochs=200,
        learning_rate=0.01,
        weight_decay=5e-4,
        patience=50,
        dtype="float32",
        random_state=0,
    ):
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_clusters = n_clusters
        self.dropout = dropout
        self.attention_dropout = attention_dropout
        self.local_kernel = local_kernel
        self.ffn = ffn
        self.scheme = scheme
        self.forced_gates = forced_gates
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.patience = patience
        self.dtype = dtype
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        gates = None if self.forced_gates is None else tuple(float(x) for x in self.forced_gates)
        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            dropout=self.dropout,
            attention_dropout=self.attention_dropout,
            local_kernel=self.local_kernel,
            ffn=self.ffn,
            n_clusters=self.n_clusters,
            scheme=self.scheme,
            forced_gates=gates,
            seed=self.random_state,
        ).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            patience=self.patience,
            dtype=self.dtype,
            seed=self.random_state,
        ).validate()

    def fit(self, X: Graph, y=None):
        """Train on ``X``; labels and splits are read from the graph itself."""
        g = check_graph(X, require_labels=True)
        cfg = self.model_config()
        if self.n_clusters > g.n_nodes:
            raise ValueError(f"n_clusters={self.n_clusters} exceeds the node count {g.n_nodes}")
        self.partition_, self.universe_, self.masks_ = prepare_instance(g, cfg.n_clusters, self.random_state)
        model = train(g, self.universe_, self.masks_, cfg, self.train_config())
        self.store_ = model.store
        self.record_ = model.record
        self.config_ = cfg
        self.classes_ = np.arange(g.n_classes)
        self.n_features_in_ = g.n_features
        self._fit_graph = g
        return self

    def _instance(self, g):
        if g is self._fit_graph:
            return self.universe_, self.masks_
        if g.n_features != self.n_features_in_:
            raise ValueError(f"graph has {g.n_features} features, model was fitted on {self.n_features_in_}")
        _, u, masks = prepare_instance(g, self.config_.n_clusters, self.random_state)
        return u, masks

    def predict_proba(self, X: Graph) -> np.ndarray:
        """Class probabilities for every real node of ``X``."""
        check_is_fitted(self, "store_")
        g = check_graph(X)
        u, masks = self._instance(g)
        return predict_proba(self.store_, self.config_, g, u, masks)

    def predict(self, X: Graph) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X: Graph, y=None, split="test"):
        """Accuracy on one split of ``X`` (or on all nodes against ``y``)."""
        pred = self.predict(X)
        if y is not None:
            return accuracy(pred, y)
        ids = X.ids_in_split(split)
        if len(ids) == 0:
            raise ValueError(f"split {split!r} is empty; expected one of {SPLIT_NAMES}")
        return accuracy(pred[ids], X.labels[ids])

"""Input checks shared by the estimator classes."""

from __future__ import annotations

import numpy as np

from .graph import Graph


def check_graph(g, require_labels: bool = False) -> Graph:
    """Return ``g`` if it is a usable :class:`Graph`, else raise."""
    if not isinstance(g, Graph):
        raise TypeError(f"expected a Graph, got {type(g).__name__}")
    if g.n_nodes == 0:
        raise ValueError("graph has no nodes")
    if not np.all(np.isfinite(g.features)):
        raise ValueError("graph features contain NaN or inf")
    if require_labels and len(g.train_ids) == 0:
        raise ValueError("graph has no training nodes")
    return g


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_probability(value, name: str, upper_open: bool = True) -> float:
    value = float(value)
    ok = 0.0 <= value < 1.0 if upper_open else 0.0 <= value <= 1.0
    if not ok:
        bound = "[0, 1)" if upper_open else "[0, 1]"
        raise ValueError(f"{name} must lie in {bound}, got {value}")
    return value


def check_choice(value, name: str, choices) -> str:
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value

"""Graph transformer with hierarchical attention masks and bi-level expert routing."""

__version__ = "0.1.0"

from .estimator import M3DClassifier
from .graph import Graph, SbmConfig, generate_hierarchical_sbm, load_graph, save_graph, toy_graph
from .harness import TrainConfig, train
from .masks import build_designed_masks, build_mask, extend_universe
from .model import ModelConfig
from .partition import GraphPartitioner, partition_graph

__all__ = [
    "Graph",
    "GraphPartitioner",
    "M3DClassifier",
    "ModelConfig",
    "SbmConfig",
    "TrainConfig",
    "build_designed_masks",
    "build_mask",
    "extend_universe",
    "generate_hierarchical_sbm",
    "load_graph",
    "partition_graph",
    "save_graph",
    "toy_graph",
    "train",
]

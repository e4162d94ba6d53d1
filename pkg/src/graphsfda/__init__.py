"""Source-free graph domain adaptation for node classification.

Adapts a pretrained graph-convolutional classifier to an unlabelled target
graph by alternating two moves: fine-tuning the model against
neighborhood-consistent pseudo-labels with prototype-based confidence
weighting, and refining the graph itself through learned feature offsets and
a budget-constrained edge mask.
"""

from .driver import AdaptConfig, AdaptReport, adapt, evaluate_accuracy, export_embeddings
from .graph_store import ShiftSpec, TargetGraph, load_graph, make_shift_pair, save_graph
from .gnn import GnnModel, init_model, pretrain_source

__all__ = [
    "AdaptConfig",
    "AdaptReport",
    "adapt",
    "evaluate_accuracy",
    "export_embeddings",
    "ShiftSpec",
    "TargetGraph",
    "load_graph",
    "save_graph",
    "make_shift_pair",
    "GnnModel",
    "init_model",
    "pretrain_source",
]

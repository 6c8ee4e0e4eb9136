"""Pose-graph attentional place recognition on padded subgraph batches."""
from .agnn import PGAT, count_parameters, load_checkpoint, pgat_forward, save_checkpoint
from .inference import average_scheme, evaluate, rank_all
from .pose_graph import Keynode, Subgraph, Trajectory, build_subgraphs, pair_labels
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "PGAT",
    "Keynode",
    "Subgraph",
    "TrainConfig",
    "Trajectory",
    "average_scheme",
    "build_subgraphs",
    "count_parameters",
    "evaluate",
    "load_checkpoint",
    "pair_labels",
    "pgat_forward",
    "rank_all",
    "save_checkpoint",
    "train",
]

"""Offline actor-critic Q-learning with adaptive, per-transition conservatism."""

from .core import OfflineDataset, RunConfig, load_dataset, save_dataset
from .envs import PointMass2D, gen_dataset, normalized_score
from .trainer import pretrain_bc, train, train_step

__all__ = [
    "OfflineDataset", "RunConfig", "load_dataset", "save_dataset",
    "PointMass2D", "gen_dataset", "normalized_score",
    "pretrain_bc", "train", "train_step",
]

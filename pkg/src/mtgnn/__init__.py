"""Multitask graph neural networks for molecular property regression."""

from .chem import MolGraph, parse_smiles
from .data import TaskTable, load_tasks, select_target_groups
from .featurize import batch_graphs, featurize_graph
from .gnn import KINDS, Model, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, masked_loss, train_model

__version__ = "0.1.0"

__all__ = [
    "KINDS", "Model", "ModelConfig", "MolGraph", "TaskTable", "TrainConfig", "batch_graphs",
    "evaluate", "featurize_graph", "load_checkpoint", "load_tasks", "masked_loss",
    "parse_smiles", "save_checkpoint", "select_target_groups", "train_model",
]

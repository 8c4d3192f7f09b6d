"""Boundary-guided anomaly detection with normalizing flows and a few anomalies."""

from .flow import FlowModel, init_flow, log_likelihood
from .objective import BoundaryState, FocalConfig, ObjectiveConfig
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "BoundaryState", "Checkpoint", "FlowModel", "FocalConfig", "ObjectiveConfig", "TrainConfig",
    "init_flow", "load_checkpoint", "log_likelihood", "save_checkpoint", "train",
]
__version__ = "0.1.0"

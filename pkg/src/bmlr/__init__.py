"""Balanced multimodal label reshaping on small numpy models."""

from .data import Dataset, SyntheticSpec, generate
from .model import MultimodalClassifier, Routing
from .reshaper import ReshapeConfig, reshape_batch
from .trainer import METHODS, RunRecord, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "METHODS",
    "MultimodalClassifier",
    "ReshapeConfig",
    "Routing",
    "RunRecord",
    "SyntheticSpec",
    "TrainConfig",
    "evaluate",
    "generate",
    "reshape_batch",
    "train",
]

"""Probabilistic masked multimodal embedding model on a small numpy autodiff core."""

from .config import MODALITY_NAMES, LossConfig, ModelConfig, RunConfig, SynthConfig, TrainConfig
from .model import ModelParams, VisibleSet, forward, load_checkpoint, save_checkpoint
from .synthdata import Dataset, generate, read_dataset, split, write_dataset
from .trainer import fit

__all__ = [
    "MODALITY_NAMES",
    "Dataset",
    "LossConfig",
    "ModelConfig",
    "ModelParams",
    "RunConfig",
    "SynthConfig",
    "TrainConfig",
    "VisibleSet",
    "fit",
    "forward",
    "generate",
    "load_checkpoint",
    "read_dataset",
    "save_checkpoint",
    "split",
    "write_dataset",
]

__version__ = "0.1.0"

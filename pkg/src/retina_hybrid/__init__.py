"""Hybrid CNN-transformer models for multi-label retinal fundus classification."""

from .config import MODEL_TYPES, ModelConfig, RunConfig, TrainConfig, build_model
from .data import LABEL_NAMES, NORMAL_INDEX

__all__ = ["LABEL_NAMES", "MODEL_TYPES", "NORMAL_INDEX", "ModelConfig", "RunConfig", "TrainConfig", "build_model"]
__version__ = "0.1.0"

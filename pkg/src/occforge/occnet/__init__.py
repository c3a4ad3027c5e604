"""Sequence-based object occupancy completion network."""

from .config import DESK, DESK_TRAIN, FULL, FULL_TRAIN, PRESETS, ModelConfig, TrainConfig, load_run_config
from .model import Model

__all__ = ["DESK", "DESK_TRAIN", "FULL", "FULL_TRAIN", "PRESETS", "Model", "ModelConfig", "TrainConfig", "load_run_config"]

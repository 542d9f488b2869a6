"""Continual dynamics learning with per-system binary masks over a frozen graph-ODE backbone."""

from .config import PRESETS, ExperimentConfig, load_config
from .harness import (
    PerformanceMatrix,
    TrainConfig,
    WindowConfig,
    average_forgetting,
    average_performance,
    run_sequence,
    run_sequence_all,
)
from .model import ModelConfig
from .simulate import SYSTEMS, SystemConfig, generate_dataset, simulate
from .subnet import MaskPool, MaskTriple, Strategy

__all__ = [
    "PRESETS",
    "SYSTEMS",
    "ExperimentConfig",
    "MaskPool",
    "MaskTriple",
    "ModelConfig",
    "PerformanceMatrix",
    "Strategy",
    "SystemConfig",
    "TrainConfig",
    "WindowConfig",
    "average_forgetting",
    "average_performance",
    "generate_dataset",
    "load_config",
    "run_sequence",
    "run_sequence_all",
    "simulate",
]

"""
Full Encoder lab - прогрессивно патчащий автоэнкодер и его варианты
(VAE, beta-VAE, beta-FE, supervised FE, линейный FE) на синтетических системах
"""

from .data_structures import (Dataset, ExperimentPlan, ModelConfig, RunReport, RunSpec,
                              SystemSpec, TrainConfig, TrainHistory)
from .errors import (ConfigError, ContractError, DomainError, FELabError, FormatError, GraphError,
                     NumericalError, ShapeError, TruncatedFileError)
from .full_encoder import FEParams, compute_losses, encode_latents, forward_full, weight_multiplier
from .nonlinear_system import build_system, evaluate, sample_dataset, traversal_curves
from .trainer import train_run
from .main import main

__version__ = "1.0.0"
__author__ = "Full Encoder Lab Team"

__all__ = [
    "Dataset",
    "ExperimentPlan",
    "ModelConfig",
    "RunReport",
    "RunSpec",
    "SystemSpec",
    "TrainConfig",
    "TrainHistory",
    "ConfigError",
    "ContractError",
    "DomainError",
    "FELabError",
    "FormatError",
    "GraphError",
    "NumericalError",
    "ShapeError",
    "TruncatedFileError",
    "FEParams",
    "compute_losses",
    "encode_latents",
    "forward_full",
    "weight_multiplier",
    "build_system",
    "evaluate",
    "sample_dataset",
    "traversal_curves",
    "train_run",
    "main",
]

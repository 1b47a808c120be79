"""Budgeted block substitution for WideResNets.

Sample mixed-blocktype reductions of a WideResNet under a parameter
budget, rank them by Fisher potential from a single minibatch, and train
the winner with attention-transfer distillation.
"""

from .blocks import BlockDescriptor, block_macs, block_params, candidate_grid
from .data import Dataset, SyntheticSpec, load_cifar_binary, make_synthetic, minibatches
from .distill import TrainRecipe, at_loss, cosine_lr, evaluate, train
from .errors import (
    BlockSwapError,
    BudgetError,
    CheckpointError,
    ConfigError,
    DataError,
    EngineError,
    TrainingDiverged,
)
from .network import Network, NetworkConfig, config_macs, config_params
from .sampler import BudgetSpec, min_feasible_params, sample_candidates
from .scoring import fisher_potential, select_best, spearman, training_metrics

__version__ = "0.1.0"

__all__ = [
    "BlockDescriptor",
    "BlockSwapError",
    "BudgetError",
    "BudgetSpec",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Dataset",
    "EngineError",
    "Network",
    "NetworkConfig",
    "SyntheticSpec",
    "TrainRecipe",
    "TrainingDiverged",
    "at_loss",
    "block_macs",
    "block_params",
    "candidate_grid",
    "config_macs",
    "config_params",
    "cosine_lr",
    "evaluate",
    "fisher_potential",
    "load_cifar_binary",
    "make_synthetic",
    "min_feasible_params",
    "minibatches",
    "sample_candidates",
    "select_best",
    "spearman",
    "train",
    "training_metrics",
    "__version__",
]

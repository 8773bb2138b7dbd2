"""Targeted smooth Bayesian causal forests.

Binary-outcome causal inference with two sum-of-trees ensembles whose leaves
are smooth curves over one target covariate.
"""

__version__ = "0.1.0"

from .config import ModelConfig
from .data import Dataset, Schema, TargetGrid, load_dataset, save_dataset, split_holdout
from .sampler import PosteriorDraws, run_chain

__all__ = [
    "Dataset",
    "ModelConfig",
    "PosteriorDraws",
    "Schema",
    "TargetGrid",
    "load_dataset",
    "run_chain",
    "save_dataset",
    "split_holdout",
]

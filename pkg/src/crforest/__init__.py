"""Clustered random forests.

Honest regression forests for grouped data whose leaf values are weighted
least-squares fits under a working within-cluster correlation, with the
correlation parameter tuned to a target covariate distribution.
"""
from .data import (ClusteredDataset, ConfigError, CovariateShiftSpec, DataError, DomainError, ForestConfig,
                   leaf_mass, load_config, load_covariates, load_dataset, save_config, save_dataset)
from .forest import (ClusteredForest, ClusteredTree, DegenerateTreeWarning, ExtrapolationWarning,
                     IntervalEstimate, confidence_interval, fit_forest, fit_tree, load_forest,
                     observation_weights, predict, recommend_ratio, save_forest, variance_little_bags)
from .partition import TreePartition, fit_partition
from .rho import estimate_rho, loss_q, loss_train, moment_rho, pilot_residuals
from .solver import CGNonConvergence, assemble_design, basis_solve, fitted_leaf_values
from .weights import WeightSpec, weight_dense, weight_matvec

__version__ = "0.1.0"

__all__ = [
    "ClusteredDataset", "ConfigError", "CovariateShiftSpec", "DataError", "DomainError", "ForestConfig",
    "leaf_mass", "load_config", "load_covariates", "load_dataset", "save_config", "save_dataset",
    "ClusteredForest", "ClusteredTree", "DegenerateTreeWarning", "ExtrapolationWarning", "IntervalEstimate",
    "confidence_interval", "fit_forest", "fit_tree", "load_forest", "observation_weights", "predict",
    "recommend_ratio", "save_forest", "variance_little_bags", "TreePartition", "fit_partition",
    "estimate_rho", "loss_q", "loss_train", "moment_rho", "pilot_residuals", "CGNonConvergence",
    "assemble_design", "basis_solve", "fitted_leaf_values", "WeightSpec", "weight_dense", "weight_matvec",
]

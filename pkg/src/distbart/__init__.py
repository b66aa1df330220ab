"""Distribution regression with Bayesian sums of trees and tree-induced random features."""

from __future__ import annotations

from .data import RawDataset, TransformedDataset, fit_transform, from_arrays, load_dataset, write_dataset
from .kernel import KernelEnsemble, gp_posterior_mean
from .randfeat import RandomFeatureModel, fit_distribution_regression, horseshoe_regression, lasso_cv
from .sampler import PosteriorChain, SamplerConfig, predict_dataset, run_backfitting
from .summarize import additive_projection, loco_importance, summary_r2
from .synth import BenchmarkConfig, generate_benchmark
from .treeprior import DecisionTree, TreePriorConfig, sample_tree_from_prior

__version__ = "0.1.0"

__all__ = [
    "BenchmarkConfig", "DecisionTree", "KernelEnsemble", "PosteriorChain", "RandomFeatureModel", "RawDataset",
    "SamplerConfig", "TransformedDataset", "TreePriorConfig", "additive_projection", "fit_distribution_regression",
    "fit_transform", "from_arrays", "generate_benchmark", "gp_posterior_mean", "horseshoe_regression",
    "lasso_cv", "load_dataset", "loco_importance", "predict_dataset", "run_backfitting",
    "sample_tree_from_prior", "summary_r2", "write_dataset",
]

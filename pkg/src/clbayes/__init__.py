"""clbayes: Bayesian inference with adjusted composite likelihoods.

Pairwise-likelihood inference for a stationary Gaussian process with
exponential covariance, with sandwich-information estimation, magnitude
and curvature adjustments of the composite likelihood, adjusted MCMC
samplers, and a replicated coverage-study harness.
"""

__version__ = "0.1.0"

from .adjust import AdjustedPosterior, PriorSpec, build_posterior, lr_statistic
from .diagnostics import (
    CoverageConfig,
    CoverageReport,
    LrConfig,
    coverage_experiment,
    credible_interval,
    lr_scatter,
    moment_summary,
    split_rhat,
)
from .gp_model import (
    GpParams,
    PairIndex,
    PairwiseLikelihood,
    FullLikelihood,
    ReplicateData,
    SiteLayout,
    full_loglik,
    load_dataset,
    pairwise_loglik,
    pairwise_score,
    save_dataset,
    simulate_gp,
)
from .samplers import (
    BlockPartition,
    ChainTrace,
    adaptive_gibbs,
    adjusted_mh,
    conditional_gaussian_predictors,
    full_conjugate_gibbs,
    overall_gibbs,
)
from .sandwich import (
    SandwichFit,
    curvature_C,
    estimate_H,
    estimate_J,
    fit_sandwich,
    magnitude_k,
    maximize_composite,
)

__all__ = [
    "AdjustedPosterior",
    "BlockPartition",
    "ChainTrace",
    "CoverageConfig",
    "CoverageReport",
    "FullLikelihood",
    "GpParams",
    "LrConfig",
    "PairIndex",
    "PairwiseLikelihood",
    "PriorSpec",
    "ReplicateData",
    "SandwichFit",
    "SiteLayout",
    "adaptive_gibbs",
    "adjusted_mh",
    "build_posterior",
    "conditional_gaussian_predictors",
    "coverage_experiment",
    "credible_interval",
    "curvature_C",
    "estimate_H",
    "estimate_J",
    "fit_sandwich",
    "full_conjugate_gibbs",
    "full_loglik",
    "load_dataset",
    "lr_scatter",
    "lr_statistic",
    "magnitude_k",
    "maximize_composite",
    "moment_summary",
    "overall_gibbs",
    "pairwise_loglik",
    "pairwise_score",
    "save_dataset",
    "simulate_gp",
    "split_rhat",
]

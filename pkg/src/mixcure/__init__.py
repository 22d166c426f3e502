"""Bayesian mixture cure models fitted by modal Gibbs sampling with Laplace fits.

The package also ships a reference Metropolis-within-Gibbs sampler and an
exact enumeration oracle for tiny instances.
"""

__version__ = "0.1.0"

from .data import Censoring, Covariate, SimTruth, read_dataset, simulate, write_dataset
from .exceptions import (
    AccuracyWarning,
    ChainError,
    ConfigurationError,
    ContractError,
    CurvatureError,
    DataError,
    DomainError,
    GridError,
    MixCureError,
    OptimizerError,
    RefusalError,
)
from .gibbs import (
    GibbsConfig,
    average_marginals,
    converged,
    derived_quantities,
    run_chain,
)
from .laplace import LaplaceConfig, conditional_mloglik, fit_conditional, fit_posterior
from .mcmc import McmcConfig, ess, psrf, run_mcmc
from .model import CompleteDataPosterior, Dataset, LatencyFamily, ParameterPoint, PriorSpec
from .oracle import enumerate_posterior

__all__ = [
    "__version__",
    "AccuracyWarning", "Censoring", "ChainError", "CompleteDataPosterior", "ConfigurationError",
    "ContractError", "Covariate", "CurvatureError", "DataError", "Dataset", "DomainError",
    "GibbsConfig", "GridError", "LaplaceConfig", "LatencyFamily", "McmcConfig", "MixCureError",
    "OptimizerError", "ParameterPoint", "PriorSpec", "RefusalError", "SimTruth",
    "average_marginals", "conditional_mloglik", "converged", "derived_quantities",
    "enumerate_posterior", "ess", "fit_conditional", "fit_posterior", "psrf", "read_dataset",
    "run_chain", "run_mcmc", "simulate", "write_dataset",
]

"""Model evidence for (multilevel) linear models.

Regression coefficients and group effects carry Gaussian priors and are
integrated out analytically, leaving likelihood functions of the variance
parameters only.  Tempered sequential Monte Carlo over that low-dimensional
space then estimates the log model evidence.  Closed-form results for the
conjugate normal-inverse-gamma linear model and low-dimensional quadrature
oracles are included for validation, along with AIC, Bayes factors and
posterior diagnostics.
"""

from mlevidence.data_model import Dataset, Standardization, load_csv, standardize
from mlevidence.model_spec import (
    CorrelationPrior,
    EtaCovStructure,
    IGPrior,
    ModelSpec,
    assemble_sigma_eta,
)
from mlevidence.likelihood_core import SufficientStats, ThetaPoint, precompute
from mlevidence.smc_engine import EvidenceEstimate, ParticleCloud, estimate_evidence, run_smc

__version__ = "0.1.0"

__all__ = [
    "CorrelationPrior",
    "Dataset",
    "EtaCovStructure",
    "EvidenceEstimate",
    "IGPrior",
    "ModelSpec",
    "ParticleCloud",
    "Standardization",
    "SufficientStats",
    "ThetaPoint",
    "assemble_sigma_eta",
    "estimate_evidence",
    "load_csv",
    "precompute",
    "run_smc",
    "standardize",
]

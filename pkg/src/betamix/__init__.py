"""Beta mixture models for clustering DNA methylation beta values."""

__version__ = "0.1.0"

from .betamath import ShapePair, beta_log_pdf, digamma_exact, digamma_lb, log_beta_fn, mom_estimate  # noqa: E402
from .em import fit  # noqa: E402
from .model import FitConfig, FittedModel, MethylationMatrix, ModelSpec, ShapeParams, Variant, validate  # noqa: E402

__all__ = [
    "FitConfig",
    "FittedModel",
    "MethylationMatrix",
    "ModelSpec",
    "ShapePair",
    "ShapeParams",
    "Variant",
    "beta_log_pdf",
    "digamma_exact",
    "digamma_lb",
    "fit",
    "log_beta_fn",
    "mom_estimate",
    "validate",
]

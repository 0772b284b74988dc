"""Bayesian shrinkage estimation of multivariate normal parameters under
(near-)monotone missingness, with mean-variance portfolio tools."""

from .errors import DataError, InfeasibleError, NumericError, ShrinkMVNError

__version__ = "0.1.0"

__all__ = ["DataError", "InfeasibleError", "NumericError", "ShrinkMVNError", "__version__"]

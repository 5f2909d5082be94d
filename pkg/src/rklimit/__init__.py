"""Bayesian limits on the Karolyhazy correlation length R_K from binned gamma spectra."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

"""Covariate-aware gradient-based meta-learning on a numpy autodiff tape."""
__version__ = "0.1.0"

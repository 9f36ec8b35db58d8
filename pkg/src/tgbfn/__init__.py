"""Target-guided Bayesian flow sampling for discrete shape programs."""

__version__ = "0.1.0"

"""Kronecker-structured tensor GP surrogates and trust-region Bayesian optimization."""

__version__ = "0.1.0"

"""Empirical-Bayes estimation of sums of observed and latent variables."""

__version__ = "0.1.0"

"""Generative flow networks for Bayesian structure learning over DAGs."""

__version__ = "0.1.0"

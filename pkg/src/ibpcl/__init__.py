"""Variational continual learning with IBP-masked Bayesian networks, from scratch on numpy."""

__version__ = "0.1.0"

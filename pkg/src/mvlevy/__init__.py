"""Multivariate Lévy models for worst-of certificate pricing."""

__version__ = "0.1.0"

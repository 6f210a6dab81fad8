"""Latent-category spatio-temporal Hawkes process for check-in data."""

__version__ = "0.1.0"

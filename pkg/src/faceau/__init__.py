"""Masked-autoencoder pre-training and action-unit heads, CPU-scale."""

__version__ = "0.1.0"

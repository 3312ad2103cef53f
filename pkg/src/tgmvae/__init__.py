"""Truncated Gaussian-mixture VAE for joint clustering and outlier detection."""

__version__ = "0.1.0"

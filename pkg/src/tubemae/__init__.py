"""Masked autoencoding with latent alignment for point cloud videos."""

__version__ = "0.1.0"

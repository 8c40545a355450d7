"""Backbone geometry toolkit and denoising SE(3) structure autoencoder."""

__version__ = "0.1.0"

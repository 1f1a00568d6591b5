"""Latent driving world model: autodiff, networks, a 2D driving simulator, training and evaluation."""

__version__ = "0.1.0"

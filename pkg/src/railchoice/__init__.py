"""Latent-class path choice estimation from smart-card and train-movement data."""

__version__ = "0.1.0"

"""Classifier-guided optimization of deterministic diffusion sampling."""

__version__ = "0.1.0"

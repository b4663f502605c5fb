"""Entropy-regularized control fine-tuning of continuous-time diffusion models."""

__version__ = "0.1.0"

"""Sketch-guided diffusion sampling with latent edge predictors."""

__version__ = "0.1.0"

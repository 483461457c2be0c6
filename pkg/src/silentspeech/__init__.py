"""Stochastic speech generation from silent video: a conditional-prior sequence VAE."""

__version__ = "0.1.0"

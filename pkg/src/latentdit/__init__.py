"""Latent diffusion transformer toolkit with a progressive resolution curriculum."""

__version__ = "0.1.0"

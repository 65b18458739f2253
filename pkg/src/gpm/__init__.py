"""Particle-based generative modeling lab on 2D Gaussian-mixture targets."""

__version__ = "0.1.0"

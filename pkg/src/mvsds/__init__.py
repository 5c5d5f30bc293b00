"""Toy multi-view diffusion prior and score distillation into a hash-grid radiance field."""

__version__ = "0.1.0"

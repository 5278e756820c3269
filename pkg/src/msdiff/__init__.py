"""Desk-scale diffusion lab for layout-guided multi-subject image generation."""

__version__ = "0.1.0"

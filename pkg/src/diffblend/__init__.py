"""Diffusion blending of reverse-SDE drifts on exactly solvable Gaussian-mixture models."""

__version__ = "0.1.0"

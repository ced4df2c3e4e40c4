"""Imaging transformer denoising at desk scale, on a numpy autograd core."""

__version__ = "0.1.0"

"""Isotropic TV compressed sensing from partial Fourier data."""

__version__ = "0.1.0"

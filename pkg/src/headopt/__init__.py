"""Differentiable articulated 3D head avatar optimization engine."""

__version__ = "0.1.0"

"""Geometric visual similarity learning on synthetic 3D volumes."""

__version__ = "0.1.0"

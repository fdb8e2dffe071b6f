"""Sketch-driven planar-quad mesh generation toolkit."""

__version__ = "0.1.0"

"""Relaxation of hierarchical structured deformations on small cubical grids."""

__version__ = "0.1.0"

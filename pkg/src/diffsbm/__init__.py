"""Diffuse-interface unfitted finite elements with level-set based extrapolation."""

__version__ = "0.1.0"

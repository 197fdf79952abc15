"""Estimator-based control of a layer-by-layer printed cantilever beam."""

__version__ = "0.1.0"

"""Quantile-forecast-driven robust model predictive control."""

__version__ = "0.1.0"

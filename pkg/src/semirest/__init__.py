"""Anomaly localization from position-constrained residuals of a coreset memory bank."""

__version__ = "0.1.0"

"""Hybrid CSI feedback codec: dataset generation, training, adaptation, metrics."""

__version__ = "0.1.0"

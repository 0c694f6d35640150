"""Efficiency-centric versus task-centric classification serving on synthetic data."""

__version__ = "0.1.0"

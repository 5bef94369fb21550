"""Targeted doubly robust estimation and collaborative learning for debiased recommendation."""

__version__ = "0.1.0"

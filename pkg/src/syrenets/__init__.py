"""Symbolic regression networks that learn Lagrangians of mechanical systems."""

__version__ = "0.1.0"

"""Numerical verification toolkit for square-root estimates of
divergence-form operators on meshed submanifolds."""

__version__ = "0.1.0"

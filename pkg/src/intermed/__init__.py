"""Heterogeneous interventional direct and indirect effects through multiple mediators."""

__version__ = "0.1.0"

"""Numerical laboratory for moment measures of log-concave densities."""

__version__ = "0.1.0"

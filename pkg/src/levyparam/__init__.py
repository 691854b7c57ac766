"""Numerical parametrix construction of heat kernels for cylindrical Levy-driven SDEs."""

__version__ = "0.1.0"

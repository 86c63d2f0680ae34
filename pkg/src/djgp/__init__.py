"""Local jump Gaussian processes on learned low-dimensional projections."""

__version__ = "0.1.0"

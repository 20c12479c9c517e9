"""Histogram tomography: ray transforms that record the distribution of values along each ray."""

__version__ = "0.1.0"

"""Subcritical level-set percolation of strongly correlated Gaussian fields."""
__version__ = "0.1.0"

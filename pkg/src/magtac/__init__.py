"""Simulated visual-magnetic tactile sensing with a from-scratch CNN+GRU force estimator."""

__version__ = "0.1.0"

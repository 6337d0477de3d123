"""Respiratory-rate estimation from PPG with a multi-scale residual CNN."""

__version__ = "0.1.0"

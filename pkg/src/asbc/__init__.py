"""Active amortized simulation-based calibration of stochastic car-following models."""

__version__ = "0.1.0"

"""Surrogate modeling, bias correction and fusion of field and simulated irradiance."""

__version__ = "0.1.0"

"""Covariance distribution optimization (CDO) for lane detection."""

__version__ = "0.1.0"

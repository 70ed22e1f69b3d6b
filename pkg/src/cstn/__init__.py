"""Taxi origin-destination demand forecasting."""

__version__ = "0.1.0"

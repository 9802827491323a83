"""Desk-scale predictor-corrector mesoscale forecasting framework."""

__version__ = "0.1.0"

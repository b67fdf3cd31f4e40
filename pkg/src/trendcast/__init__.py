"""Trend-filtered features for temporal forecasting: solver, models, evaluation."""

__version__ = "0.1.0"

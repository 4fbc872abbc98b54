"""Gleason-pattern survival and risk-stratification toolkit."""

__version__ = "1.0.0"

"""Trace-driven model of a weight-stationary systolic matrix engine attached to a CPU core."""

__version__ = "0.1.0"

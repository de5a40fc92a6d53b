"""Certainty-equivalent adaptive MPC with finite-tail costs."""

__version__ = "0.1.0"

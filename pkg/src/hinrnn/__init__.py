"""Fraud reviewer group detection with a feature-conditioned graph RNN."""

__version__ = "0.1.0"

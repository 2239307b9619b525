"""Counterfactual dose-response estimation with representation balancing."""

__version__ = "0.1.0"

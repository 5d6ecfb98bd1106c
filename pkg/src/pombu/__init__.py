"""Epistemic Q-value uncertainty for model-based policy optimization."""

__version__ = "0.1.0"

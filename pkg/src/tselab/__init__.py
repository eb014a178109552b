"""Desk-scale numerical laboratory for token similarity escalation in transformers."""

__version__ = "0.1.0"

"""Prompt condensation for visual in-context learning, at desk scale."""

__version__ = "0.1.0"

"""Flaw-axis evaluation harness for multimodal generation endpoints."""

__version__ = "0.1.0"

"""Transition-aware multi-activity knowledge tracing."""

__version__ = "0.1.0"

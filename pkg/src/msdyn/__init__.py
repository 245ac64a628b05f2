"""Multi-step training losses for learned dynamics models."""

__version__ = "0.1.0"

"""Graph classification with a batch-level relation encoder and feedback training."""

__version__ = "0.1.0"

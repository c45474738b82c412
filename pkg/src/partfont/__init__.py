"""Few-part-shot font generation."""

__version__ = "0.1.0"

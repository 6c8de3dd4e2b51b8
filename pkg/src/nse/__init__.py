"""Search-space evolution for multi-branch architecture search."""

__version__ = "0.1.0"

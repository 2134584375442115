"""Multi-group differential item functioning analysis."""

__version__ = "0.1.0"

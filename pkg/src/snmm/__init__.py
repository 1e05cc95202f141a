"""Treatment-effect estimation over time with structural nested mean models."""

__version__ = "0.1.0"

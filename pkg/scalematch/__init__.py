"""ScaleMatch: detector-free image matching with progressive patch pruning."""

__version__ = "0.1.0"

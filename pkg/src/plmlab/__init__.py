"""Part-level multi-labeling for learning with noisy labels, at desk scale."""

__version__ = "0.1.0"

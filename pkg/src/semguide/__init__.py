"""Semantic-guided activation maps for weakly supervised segmentation."""

__version__ = "0.1.0"

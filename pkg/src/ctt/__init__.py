"""Cross-teacher semi-supervised segmentation with pixel contrastive memory banks."""

__version__ = "0.1.0"

"""Box-supervised domain adaptation for segmentation on a synthetic benchmark."""

__version__ = "0.1.0"

"""Detection toolkit for adversarially attacked frames in image streams."""

__version__ = "0.1.0"

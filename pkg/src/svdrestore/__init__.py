"""Singular value/vector analysis of image degradations and a small numpy
restoration network trained with decomposition-aware operators and losses."""

__version__ = "0.1.0"

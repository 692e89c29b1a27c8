"""Discrete codebook regularization for video temporal grounding on numpy."""

__version__ = "0.1.0"

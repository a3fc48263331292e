"""Polyp segmentation with feedback masks, attribute prompts and test-time refinement."""

__version__ = "0.1.0"

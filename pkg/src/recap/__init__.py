"""Retrieval-augmented image-captioning toolkit."""

__version__ = "0.1.0"

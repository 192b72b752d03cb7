"""Unified generative retrieval and question answering on a shared encoder."""

__version__ = "0.1.0"

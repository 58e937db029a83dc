"""Multimodal SME credit scoring with graph neural networks over firm networks."""

__version__ = "0.1.0"

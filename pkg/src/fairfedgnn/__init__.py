"""Fairness-aware, locally private federated training of a graph-attention recommender."""

__version__ = "0.1.0"

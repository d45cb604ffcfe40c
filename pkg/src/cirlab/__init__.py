"""Composed image retrieval: synthetic triplet generation, hybrid training, evaluation."""

__version__ = "0.1.0"

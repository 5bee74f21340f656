"""Two-stream generative sequential recommender."""

__version__ = "0.1.0"

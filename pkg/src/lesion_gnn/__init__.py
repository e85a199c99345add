"""Self-pruning graph neural network for lesion-level disease-activity prediction."""

__version__ = "0.1.0"

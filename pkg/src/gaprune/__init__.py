"""Genetic-algorithm channel pruning with second-order layer-wise error and attention distillation."""

__version__ = "0.1.0"

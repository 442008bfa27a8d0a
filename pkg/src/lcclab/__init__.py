"""Recovering pruned transformers by compensating lost activation components."""

__version__ = "0.1.0"

"""Pair-encoder pretraining, composite objective and training loop."""

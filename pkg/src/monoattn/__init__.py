"""Monotonicity loss for soft attention in character-level seq2seq models."""

__version__ = "0.1.0"

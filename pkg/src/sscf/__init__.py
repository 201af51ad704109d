"""Spiking few-shot learning with self- and cross-feature attention."""

__version__ = "0.1.0"

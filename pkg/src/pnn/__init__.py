"""Parsimonious neural networks for integrators and melting laws."""

__version__ = "0.1.0"

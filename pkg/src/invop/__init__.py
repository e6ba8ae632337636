"""Inverse operator networks for PDE inverse problems, trained physics-informed."""

__version__ = "0.1.0"

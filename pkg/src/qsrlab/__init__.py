"""Simulator and numerical lab for local gradient methods with dynamic synchronization."""

__version__ = "0.1.0"

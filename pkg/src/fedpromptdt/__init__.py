"""Federated prompt-based decision transformer for MEC resource allocation."""

__version__ = "0.1.0"

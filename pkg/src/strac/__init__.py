"""Structured actor-critic training for a shared graph-network dialogue policy."""

__version__ = "0.1.0"

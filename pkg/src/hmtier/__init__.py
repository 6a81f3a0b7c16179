"""Trace-driven two-tier memory simulator with lifetime-aware tensor migration."""

__version__ = "0.1.0"

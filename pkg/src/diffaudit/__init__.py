"""Differential auditing of captured network traffic for general-audience services."""
__version__ = "0.1.0"

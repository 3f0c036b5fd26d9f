"""Quasi-static damage finite elements with local, gradient and network-driven non-local strain."""

__version__ = "0.1.0"

"""Exact and Monte Carlo laboratory for mixed p-spin glasses on and off the Nishimori manifold."""

__version__ = "0.1.0"

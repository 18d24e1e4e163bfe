"""Unrolled proximal-gradient networks and classical sparse solvers for compressed sensing."""

__version__ = "0.1.0"

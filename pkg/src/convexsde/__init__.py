"""Truncated Euler schemes and convex-ordering verification for 1-D SDEs."""

__version__ = "0.1.0"

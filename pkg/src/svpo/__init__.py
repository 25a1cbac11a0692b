"""Step-level value preference optimization on a synthetic arithmetic env."""

__version__ = "0.1.0"

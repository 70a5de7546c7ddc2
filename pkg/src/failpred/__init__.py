"""Failure prediction by learning true-class-probability confidence."""

__version__ = "0.1.0"

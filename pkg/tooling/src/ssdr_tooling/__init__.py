"""Offline tooling for the defect-recognition engine."""

__version__ = "0.1.0"

"""Blind source separation with FastMNMF for distributed microphone arrays."""

__version__ = "0.1.0"

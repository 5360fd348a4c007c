"""Shortcut-learning audits for audio anti-spoofing detectors."""

__version__ = "0.1.0"

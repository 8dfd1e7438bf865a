"""Iris morphing attacks: synthesis, recognition, vulnerability metrics and detection."""

__version__ = "0.1.0"

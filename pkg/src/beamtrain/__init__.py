"""Dedicated beam training for mobile mmWave links."""

__version__ = "0.1.0"

"""Phasor-based admittance identification and event localization for distribution feeders."""

__version__ = "0.1.0"

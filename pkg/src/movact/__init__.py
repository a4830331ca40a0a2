"""Stabilizing controls for 1D parabolic equations with a moving actuator."""

__version__ = "0.1.0"

"""Two-step symmetric integrators for charged-particle dynamics."""

__version__ = "0.1.0"

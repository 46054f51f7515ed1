"""S6 spiking state-space sequence engine."""

__version__ = "0.1.0"

"""Drift-resilient infrared/visible video fusion with history-conditioned diffusion."""

__version__ = "0.1.0"

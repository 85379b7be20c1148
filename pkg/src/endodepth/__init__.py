"""Simulated colonoscopy data, sim-to-real translation and monocular depth estimation."""

__version__ = "0.1.0"

"""Radiance-field scene reconstruction and simulation assets for sim-to-real policy training."""

__version__ = "0.1.0"

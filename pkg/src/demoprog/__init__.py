"""Demonstration-to-program pipeline for colored-cube pick-and-place on simulated observations."""

__version__ = "0.1.0"

"""Simulation and localization toolkit for coherent Rabi imaging microscopy."""

__version__ = "0.1.0"

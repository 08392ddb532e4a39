"""Measuring interference for control in reinforcement learning."""

__version__ = "0.1.0"

"""Simulation-driven topology optimization of soft gripper fingers."""

__version__ = "0.1.0"

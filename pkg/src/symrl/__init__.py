"""Symmetry-exploiting reinforcement learning on a grid-world UAV coverage planner."""

__version__ = "0.1.0"

"""Branching random walks in random environment, the discrete parabolic Anderson model and their duals."""

__version__ = "0.1.0"

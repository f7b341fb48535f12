"""Distributionally robust chance-constrained MDP solvers."""

__version__ = "0.1.0"

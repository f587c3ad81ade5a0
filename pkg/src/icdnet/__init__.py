"""Inertial displacement network with uncertainty, and its fusion into a
sliding-window visual-inertial estimator."""

__version__ = "0.1.0"

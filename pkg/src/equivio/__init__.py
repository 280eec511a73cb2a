"""Equivariant visual-inertial odometry: filter, simulator, metrics, CLI."""

__version__ = "0.1.0"

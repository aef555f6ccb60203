"""Discrete-in-time nudging of the 2D Navier-Stokes equations with noisy local-average observations."""

__version__ = "0.1.0"

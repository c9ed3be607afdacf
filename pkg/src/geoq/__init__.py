"""Exact and diffusion-approximate steady state of the discrete-time
many-server queue with Poisson (or general) arrivals and geometric stays."""

__version__ = "0.1.0"

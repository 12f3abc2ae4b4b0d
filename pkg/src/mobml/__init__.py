"""Overdamped Brownian dynamics with data-driven hydrodynamic mobility models."""

"""Timestep-resolved probing and motion customization for a toy video diffusion model."""

__version__ = "0.1.0"

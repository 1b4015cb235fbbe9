"""Latent-space diffusion captioning for synthetic scenes."""

__version__ = "0.1.0"

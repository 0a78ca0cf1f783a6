"""Occupancy prediction with a latent cross-attention transformer, plus exact stereo geometry."""

__version__ = "0.1.0"

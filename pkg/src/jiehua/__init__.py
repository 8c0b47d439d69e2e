"""Desk-scale style transfer: conditional diffusion with a grafted control
branch, CycleGAN, Canny-conditioned triplet datasets and FID evaluation."""

__version__ = "0.1.0"

"""Skeleton-conditioned triplane reposing with a conditional diffusion U-Net, at desk scale."""

__version__ = "0.1.0"

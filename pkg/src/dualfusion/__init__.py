"""Desk-scale dual-conditioned latent diffusion for style transfer."""

from dualfusion.tensor import Tensor, Rng, no_grad

__all__ = ["Tensor", "Rng", "no_grad"]
__version__ = "0.1.0"

"""vmdlab: variational masked diffusion on toy sequence distributions.

A small laboratory for studying what a global latent variable buys a masked
discrete diffusion model: numpy-only autodiff, transformer encoder/decoder
backbones with block-structured attention, the three training objectives,
confidence-based samplers, exactly-known toy datasets, and oracle-grade
evaluation.
"""

from .autodiff import (
    Adam,
    Tensor,
    backward,
    gaussian_kl,
    gradcheck,
    reparameterize,
)
from .rng import split_streams

__all__ = [
    "Adam",
    "Tensor",
    "backward",
    "gaussian_kl",
    "gradcheck",
    "reparameterize",
    "split_streams",
]

__version__ = "0.1.0"

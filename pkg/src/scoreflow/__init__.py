"""Score-conditioned latent editing of faces with a continuous normalizing flow."""

__version__ = "0.1.0"

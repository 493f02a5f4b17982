"""Vine copula autoencoder toolkit.

A linear autoencoder compresses images to a small latent space, a D-vine
pair-copula model estimates the latent density, and decoding vine
samples gives a generative model. Entropy and KL divergence between
latent densities measure how a backdoor trigger reshapes that space.
"""

__version__ = "0.1.0"

"""
Closed-loop unsupervised disentanglement: a diffusion autoencoder and a
beta-VAE co-pilot coupled by latent distillation and entropy-driven
capacity feedback, with direction discovery and disentanglement metrics.
"""

__version__ = "0.1.0"

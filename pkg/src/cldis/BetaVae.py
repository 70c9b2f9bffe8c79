"""
Module containing the co-pilot beta-VAE: a Gaussian encoder and decoder, the
reparameterization, the closed-form KL to the unit Gaussian prior and the
beta-weighted and capacity-targeted objectives.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .DiffusionAutoencoder import ConvEncoder, group_norm
from .cldis_errors import PreconditionError

logger = logging.getLogger(__name__)


class GaussianPosterior(NamedTuple):
    """Diagonal Gaussian ``q(z|x)``; ``logvar`` is the natural-log variance."""
    mu: torch.Tensor
    logvar: torch.Tensor


class VaeDecoder(nn.Module):
    def __init__(self, image_size: Tuple[int, int, int], latent_dim: int, channels: int = 32):
        super(VaeDecoder, self).__init__()
        self.image_size = tuple(image_size)
        out_channels, height, width = self.image_size
        self.start_size = (math.ceil(height / 16), math.ceil(width / 16))
        self.start_channels = 2 * channels
        self.fc = nn.Linear(latent_dim, self.start_channels * self.start_size[0] * self.start_size[1])
        widths = [2 * channels, 2 * channels, channels, channels]
        layers = []
        in_channels = self.start_channels
        for width in widths:
            layers += [nn.ConvTranspose2d(in_channels, width, 4, stride=2, padding=1), group_norm(width), nn.SiLU()]
            in_channels = width
        self.deconvs = nn.Sequential(*layers)
        self.out_conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, z):
        h = self.fc(z).view(-1, self.start_channels, *self.start_size)
        h = self.deconvs(F.silu(h))
        _, height, width = self.image_size
        return torch.sigmoid(self.out_conv(h[:, :, :height, :width]))


@dataclass
class VaeConfig:
    image_size: Tuple[int, int, int] = (3, 32, 32)
    latent_dim: int = 32
    channels: int = 32
    beta: float = 4.0

    def to_dict(self):
        return asdict(self)


class VaeModel(nn.Module):
    """
    Gaussian encoder ``q_phi(z|x)`` and a decoder for the mean of a unit-variance
    Gaussian likelihood ``p_theta(x|z)`` (scored as summed squared error),
    with a KL weight ``beta``. ``beta = 1`` is the plain VAE.

    :param config: architecture hyperparameters and ``beta``
    """
    def __init__(self, config: VaeConfig):
        super(VaeModel, self).__init__()
        if config.beta <= 0:
            raise PreconditionError(f"beta must be positive, got {config.beta}")
        self.config = config
        self.beta = config.beta
        self.latent_dim = config.latent_dim
        self.encoder = ConvEncoder(config.image_size, 2 * config.latent_dim, config.channels)
        self.decoder = VaeDecoder(config.image_size, config.latent_dim, config.channels)

    def encode(self, x: torch.Tensor) -> GaussianPosterior:
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return GaussianPosterior(mu, logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x, eps):
        post = self.encode(x)
        return self.decode(reparameterize(post, eps)), post


def vae_encode(model: VaeModel, x: torch.Tensor) -> GaussianPosterior:
    """Per-dimension Gaussian parameters of ``q(z|x)``, each ``[B, D_v]``."""
    return model.encode(x)


def reparameterize(post: GaussianPosterior, eps: torch.Tensor) -> torch.Tensor:
    """``z = mu + exp(logvar / 2) * eps``."""
    if eps.shape != post.mu.shape:
        raise PreconditionError(f"eps has shape {tuple(eps.shape)}, the posterior {tuple(post.mu.shape)}")
    return post.mu + torch.exp(0.5 * post.logvar) * eps


def kl_to_standard_normal(post: GaussianPosterior) -> torch.Tensor:
    """
    ``0.5 * sum_d (mu^2 + exp(logvar) - logvar - 1)`` summed over latent
    dimensions and averaged over the batch.
    """
    kl = 0.5 * (post.mu.pow(2) + post.logvar.exp() - post.logvar - 1.0).sum(dim=-1)
    return kl.mean()


def reconstruction_error(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Squared error summed per sample and averaged over the batch."""
    if x_hat.shape != x.shape:
        raise PreconditionError(f"Reconstruction shape {tuple(x_hat.shape)} does not match {tuple(x.shape)}")
    return F.mse_loss(x_hat, x, reduction='sum').div(x.shape[0])


def beta_vae_objective(x_hat, x, post: GaussianPosterior, beta: float):
    """:return: ``(recon + beta * kl, recon, kl)``"""
    recon = reconstruction_error(x_hat, x)
    kl = kl_to_standard_normal(post)
    return recon + beta * kl, recon, kl


def capacity_objective(x_hat, x, post: GaussianPosterior, beta: float, capacity: float):
    """
    ``recon + beta * |kl - capacity|``.

    :raises PreconditionError: for a negative capacity
    :return: ``(total, recon, kl)``
    """
    if capacity < 0:
        raise PreconditionError(f"Capacity must be nonnegative, got {capacity}")
    recon = reconstruction_error(x_hat, x)
    kl = kl_to_standard_normal(post)
    return recon + beta * (kl - capacity).abs(), recon, kl


def beta_vae_loss(model: VaeModel, x: torch.Tensor, eps: torch.Tensor):
    """
    The beta-weighted evidence lower bound of ``model`` on ``x``.

    :return: ``(total, recon, kl)``
    """
    x_hat, post = model(x, eps)
    return beta_vae_objective(x_hat, x, post, model.beta)


def capacity_loss(model: VaeModel, x: torch.Tensor, eps: torch.Tensor, C: float) -> torch.Tensor:
    """The capacity-targeted objective of ``model`` on ``x`` with capacity ``C``."""
    if C < 0:
        raise PreconditionError(f"Capacity must be nonnegative, got {C}")
    x_hat, post = model(x, eps)
    return capacity_objective(x_hat, x, post, model.beta, C)[0]

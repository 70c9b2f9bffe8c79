"""
Module containing the diffusion autoencoder: the linear noise schedule, the
closed-form forward process and its inverse, the semantic encoder, the
latent-conditioned U-Net denoiser and deterministic (DDIM) sampling.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .cldis_errors import PreconditionError

logger = logging.getLogger(__name__)

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    """
    Per-timestep noise coefficients, held in float64.

    :param beta: ``[T]`` noise variances
    :param alpha: ``[T]`` values ``1 - beta``
    :param alpha_bar: ``[T]`` cumulative products of ``alpha``
    :param sigma: ``[T]`` sampler noise scales (zero: sampling is deterministic)
    """
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor

    @property
    def T(self) -> int:
        return self.beta.shape[0]


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """
    Linearly interpolate ``beta`` over ``T`` steps.

    :raises PreconditionError: unless ``T >= 1`` and ``0 < beta_start <= beta_end < 1``
    """
    if T < 1:
        raise PreconditionError(f"T must be positive, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise PreconditionError(f"Need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return DiffusionSchedule(beta, alpha, alpha_bar, torch.zeros_like(beta))


def strided_schedule(T: int, steps: int) -> List[int]:
    """
    Evenly spaced sampler timesteps from ``T - 1`` down to ``0``.

    :param T: the number of diffusion timesteps
    :param steps: the number of sampler steps (capped at ``T``)
    :return: a strictly decreasing list ending at 0
    """
    if steps < 1:
        raise PreconditionError(f"steps must be positive, got {steps}")
    steps = min(steps, T)
    if steps == 1:
        return [0]
    points = torch.linspace(T - 1, 0, steps, dtype=torch.float64).round().long().tolist()
    return sorted(set(points), reverse=True)


def _coefficient(values: torch.Tensor, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    # alpha_bar style lookup; index -1 stands for the noise-free end of the chain
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        t = t.to(torch.long).cpu()
        if t.shape[0] != like.shape[0]:
            raise PreconditionError(f"{t.shape[0]} timesteps for a batch of {like.shape[0]}")
        out = torch.where(t < 0, torch.ones_like(t, dtype=torch.float64), values[t.clamp(min=0)])
        return out.to(like.device, like.dtype).view(-1, *([1] * (like.dim() - 1)))
    t = int(t)
    out = values.new_tensor(1.0) if t < 0 else values[t]
    return out.to(like.device, like.dtype)


def _check_timestep(t: Timestep, schedule: DiffusionSchedule, allow_end: bool = False) -> None:
    low = -1 if allow_end else 0
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        bad = (t < low) | (t >= schedule.T)
        if bool(bad.any()):
            raise PreconditionError(f"Timesteps must lie in [{low}, {schedule.T})")
    elif not low <= int(t) < schedule.T:
        raise PreconditionError(f"Timestep {int(t)} outside [{low}, {schedule.T})")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise PreconditionError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


def forward_diffuse(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """
    Noise ``x0`` to timestep ``t`` in closed form:
    ``x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps``.
    """
    _check_same_shape(x0, eps, "forward_diffuse")
    _check_timestep(t, schedule)
    alpha_bar = _coefficient(schedule.alpha_bar, t, x0)
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps


def _predict_x0(x_t, eps_hat, t, schedule):
    alpha_bar = _coefficient(schedule.alpha_bar, t, x_t)
    return (x_t - (1.0 - alpha_bar).sqrt() * eps_hat) / alpha_bar.sqrt()


def _move(x_t, eps_hat, t, t_to, schedule):
    x0_hat = _predict_x0(x_t, eps_hat, t, schedule)
    alpha_bar_to = _coefficient(schedule.alpha_bar, t_to, x_t)
    return alpha_bar_to.sqrt() * x0_hat + (1.0 - alpha_bar_to).sqrt() * eps_hat


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, schedule: DiffusionSchedule) -> torch.Tensor:
    """
    Invert the forward process given a noise estimate:
    ``x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)``.
    """
    _check_same_shape(x_t, eps_hat, "predict_x0")
    _check_timestep(t, schedule)
    return _predict_x0(x_t, eps_hat, t, schedule)


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: DiffusionSchedule) -> torch.Tensor:
    """
    One deterministic reverse step from ``t`` to ``t_prev``. ``t_prev = -1``
    means the end of the chain (``alpha_bar = 1``) and returns ``x0_hat``.
    """
    _check_same_shape(x_t, eps_hat, "ddim_step")
    _check_timestep(t, schedule)
    _check_timestep(t_prev, schedule, allow_end=True)
    if t_prev >= t:
        raise PreconditionError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    return _move(x_t, eps_hat, t, t_prev, schedule)


def _check_step_schedule(step_schedule: Sequence[int], schedule: DiffusionSchedule) -> None:
    if len(step_schedule) == 0:
        raise PreconditionError("The sampler step schedule is empty")
    if any(a <= b for a, b in zip(step_schedule, step_schedule[1:])):
        raise PreconditionError("The sampler step schedule must be strictly decreasing")
    if step_schedule[-1] != 0:
        raise PreconditionError("The sampler step schedule must end at 0")
    _check_timestep(step_schedule[0], schedule)


def _timesteps(t: int, x: torch.Tensor) -> torch.Tensor:
    return torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)


def sample(
    denoiser: 'ConditionalDenoiser',
    z_sem: torch.Tensor,
    x_T: torch.Tensor,
    step_schedule: Sequence[int],
    schedule: DiffusionSchedule,
    grad: bool = False,
) -> torch.Tensor:
    """
    Decode ``x_T`` conditioned on ``z_sem`` with iterated :func:`ddim_step`.

    :param denoiser: the noise prediction network
    :param z_sem: ``[B, D]`` semantic latents
    :param x_T: ``[B, C, H, W]`` starting noise
    :param step_schedule: strictly decreasing timesteps ending at 0
    :param schedule: the noise schedule
    :param grad: keep the autograd graph (used to train latent directions
        through the sampler)
    :return: the decoded images
    """
    _check_step_schedule(step_schedule, schedule)
    x = x_T
    with torch.set_grad_enabled(grad):
        for i, t in enumerate(step_schedule):
            t_prev = step_schedule[i + 1] if i + 1 < len(step_schedule) else -1
            eps_hat = denoiser(x, _timesteps(t, x), z_sem)
            x = _move(x, eps_hat, t, t_prev, schedule)
    return x


@torch.no_grad()
def ddim_invert(
    denoiser: 'ConditionalDenoiser',
    x0: torch.Tensor,
    z_sem: torch.Tensor,
    step_schedule: Sequence[int],
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """
    Run the deterministic sampler backwards to find the ``x_T`` that
    :func:`sample` maps (approximately) back to ``x0``.
    """
    _check_step_schedule(step_schedule, schedule)
    x = x0
    t_from = -1
    for t in reversed(step_schedule):
        eps_hat = denoiser(x, _timesteps(max(t_from, 0), x), z_sem)
        x = _move(x, eps_hat, t_from, t, schedule)
        t_from = t
    return x


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, ``[B] -> [B, dim]``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class ConvEncoder(nn.Module):
    """
    Four stride-2 convolution stages followed by a linear projection,
    mapping ``[B, C, H, W]`` images to ``[B, out_features]``.
    """
    def __init__(self, image_size: Tuple[int, int, int], out_features: int, channels: int = 32):
        super(ConvEncoder, self).__init__()
        self.image_size = tuple(image_size)
        widths = [channels, channels * 2, channels * 2, channels * 2]
        layers = []
        in_channels = self.image_size[0]
        for width in widths:
            layers += [nn.Conv2d(in_channels, width, 3, stride=2, padding=1), group_norm(width), nn.SiLU()]
            in_channels = width
        self.convs = nn.Sequential(*layers)
        height, width = self.image_size[1:]
        for _ in widths:
            height, width = math.ceil(height / 2), math.ceil(width / 2)
        self.fc = nn.Linear(in_channels * height * width, out_features)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.image_size:
            raise PreconditionError(f"Expected images of shape [B, {', '.join(map(str, self.image_size))}], got {tuple(x.shape)}")

    def forward(self, x):
        self.check_input(x)
        return self.fc(self.convs(x).flatten(1))


class SemanticEncoder(ConvEncoder):
    """Maps an image to its ``D``-dimensional semantic latent."""
    def __init__(self, image_size: Tuple[int, int, int], latent_dim: int, channels: int = 32):
        super(SemanticEncoder, self).__init__(image_size, latent_dim, channels)
        self.latent_dim = latent_dim


def encode_semantic(encoder: SemanticEncoder, x0: torch.Tensor) -> torch.Tensor:
    """``[B, C, H, W] -> [B, D]``; deterministic in evaluation mode."""
    return encoder(x0)


class ResBlock(nn.Module):
    """
    Residual block with an additive timestep embedding and feature-wise
    affine modulation by the semantic latent.
    """
    def __init__(self, in_channels: int, out_channels: int, emb_dim: int, cond_dim: int):
        super(ResBlock, self).__init__()
        self.norm1 = group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(emb_dim, out_channels)
        self.norm2 = group_norm(out_channels)
        self.cond_proj = nn.Linear(cond_dim, 2 * out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, emb, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(emb))[:, :, None, None]
        scale, shift = self.cond_proj(cond).chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class ConditionalDenoiser(nn.Module):
    """
    A three-level U-Net ``eps_theta(x_t, t, z_sem)`` predicting the noise in
    ``x_t``. Height and width must be divisible by 4.
    """
    def __init__(self, image_size: Tuple[int, int, int], cond_dim: int, channels: int = 32):
        super(ConditionalDenoiser, self).__init__()
        self.image_size = tuple(image_size)
        in_channels, height, width = self.image_size
        if height % 4 or width % 4:
            raise PreconditionError(f"Denoiser needs height and width divisible by 4, got {height}x{width}")
        c = channels
        emb_dim = 4 * c
        self.base_channels = c
        self.time_mlp = nn.Sequential(nn.Linear(c, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))

        self.in_conv = nn.Conv2d(in_channels, c, 3, padding=1)
        self.down1 = ResBlock(c, c, emb_dim, cond_dim)
        self.downsample1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.down2 = ResBlock(c, 2 * c, emb_dim, cond_dim)
        self.downsample2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * c, 2 * c, emb_dim, cond_dim)
        self.mid2 = ResBlock(2 * c, 2 * c, emb_dim, cond_dim)
        self.upsample2 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.up2 = ResBlock(4 * c, 2 * c, emb_dim, cond_dim)
        self.upsample1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.up1 = ResBlock(3 * c, c, emb_dim, cond_dim)
        self.out_norm = group_norm(c)
        self.out_conv = nn.Conv2d(c, in_channels, 3, padding=1)

    def forward(self, x_t, t, z_sem):
        if tuple(x_t.shape[1:]) != self.image_size:
            raise PreconditionError(f"Expected images of shape {self.image_size}, got {tuple(x_t.shape[1:])}")
        if not isinstance(t, torch.Tensor) or t.dim() == 0:
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
        emb = self.time_mlp(timestep_embedding(t, self.base_channels).to(x_t.dtype))

        h0 = self.in_conv(x_t)
        h1 = self.down1(h0, emb, z_sem)
        h2 = self.down2(self.downsample1(h1), emb, z_sem)
        h = self.downsample2(h2)
        h = self.mid2(self.mid1(h, emb, z_sem), emb, z_sem)
        h = self.upsample2(F.interpolate(h, scale_factor=2, mode='nearest'))
        h = self.up2(torch.cat([h, h2], dim=1), emb, z_sem)
        h = self.upsample1(F.interpolate(h, scale_factor=2, mode='nearest'))
        h = self.up1(torch.cat([h, h1], dim=1), emb, z_sem)
        return self.out_conv(F.silu(self.out_norm(h)))


def denoise(denoiser: ConditionalDenoiser, x0, z_sem, t, eps, schedule: DiffusionSchedule):
    """
    Noise ``x0`` to ``t`` and predict the noise back.

    :return: ``(loss, x_t, eps_hat)`` where ``loss`` is the mean squared error
        between ``eps`` and ``eps_hat``
    """
    x_t = forward_diffuse(x0, t, eps, schedule)
    eps_hat = denoiser(x_t, t, z_sem)
    return F.mse_loss(eps_hat, eps), x_t, eps_hat


def denoising_loss(denoiser: ConditionalDenoiser, x0, z_sem, t, eps, schedule: DiffusionSchedule) -> torch.Tensor:
    """Mean squared error between ``eps`` and the denoiser's estimate of it."""
    return denoise(denoiser, x0, z_sem, t, eps, schedule)[0]


@dataclass
class DiffAeConfig:
    """Architecture and schedule hyperparameters of a :class:`DiffusionAutoencoder`."""
    image_size: Tuple[int, int, int] = (3, 32, 32)
    latent_dim: int = 32
    unet_channels: int = 32
    encoder_channels: int = 32
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def to_dict(self):
        return asdict(self)


class DiffusionAutoencoder(nn.Module):
    """
    The semantic encoder and the conditional denoiser sharing one noise
    schedule.

    :param config: the architecture and schedule hyperparameters
    """
    def __init__(self, config: DiffAeConfig):
        super(DiffusionAutoencoder, self).__init__()
        self.config = config
        self.encoder = SemanticEncoder(config.image_size, config.latent_dim, config.encoder_channels)
        self.denoiser = ConditionalDenoiser(config.image_size, config.latent_dim, config.unet_channels)
        self.schedule = make_linear_schedule(config.timesteps, config.beta_start, config.beta_end)

    def encode(self, x0: torch.Tensor) -> torch.Tensor:
        return encode_semantic(self.encoder, x0)

    def step_schedule(self, steps: int) -> List[int]:
        return strided_schedule(self.config.timesteps, steps)

    def decode(self, z_sem: torch.Tensor, x_T: torch.Tensor, steps: int, grad: bool = False) -> torch.Tensor:
        return sample(self.denoiser, z_sem, x_T, self.step_schedule(steps), self.schedule, grad=grad)

    def invert(self, x0: torch.Tensor, z_sem: torch.Tensor, steps: int) -> torch.Tensor:
        return ddim_invert(self.denoiser, x0, z_sem, self.step_schedule(steps), self.schedule)

    @torch.no_grad()
    def reconstruct(self, x0: torch.Tensor, x_T: torch.Tensor = None, steps: int = 50) -> torch.Tensor:
        """
        Encode and decode ``x0``. Without an explicit ``x_T`` the starting
        noise is found by inverting the sampler.
        """
        z_sem = self.encode(x0)
        if x_T is None:
            x_T = self.invert(x0, z_sem, steps)
        return self.decode(z_sem, x_T, steps)

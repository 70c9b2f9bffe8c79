"""
Module containing the closed-loop coupling of the diffusion autoencoder and
the co-pilot VAE: latent distillation, image entropy, the dynamic capacity
controller, the capacity feedback loss, the pre-training and closed-loop
training phases, and the checkpoint of the coupled state.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from torch.optim import AdamW

from .BetaVae import (
    VaeConfig,
    VaeModel,
    beta_vae_objective,
    capacity_loss,
    capacity_objective,
    reparameterize,
)
from .DiffusionAutoencoder import DiffAeConfig, DiffusionAutoencoder, denoise, predict_x0
from .cldis_args import CldisTrainingArguments
from .cldis_data import FactorDataset, endless_batches
from .cldis_errors import DependencyError, ManifestError, NumericAbort, PreconditionError
from .cldis_io import append_rows, load_tensors, parse_shape, read_manifest, read_table, save_tensors, write_manifest

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
TRAIN_LOG_COLUMNS = ['step', 'l_diff', 'l_dt', 'l_fd', 'c_dyn', 'kl']
CHECKPOINT_FORMAT = 'cldis-closed-loop'
HISTORY_FILE = 'controller_history.csv'
SEED_STRIDE = 1000003
# last step slot of every seed, reserved for held-out draws
HELD_OUT_STEP = SEED_STRIDE - 1


def image_entropy(x: torch.Tensor) -> float:
    """
    Shannon entropy (nats) of an image read as a distribution over its
    pixels: values are floored at 1e-12, flattened and normalized to sum 1.
    An all-zero image therefore becomes uniform and scores ``ln(C*H*W)``.
    """
    if x.numel() == 0:
        raise PreconditionError("Cannot compute the entropy of an empty image")
    flat = x.detach().to(torch.float64).flatten().clamp(min=PROBABILITY_FLOOR)
    p = flat / flat.sum()
    return float(-(p * p.log()).sum())


def mean_image_entropy(images: torch.Tensor) -> float:
    """Mean of :func:`image_entropy` over a ``[B, C, H, W]`` batch."""
    flat = images.detach().to(torch.float64).flatten(1).clamp(min=PROBABILITY_FLOOR)
    p = flat / flat.sum(dim=1, keepdim=True)
    return float(-(p * p.log()).sum(dim=1).mean())


@dataclass
class CDynController:
    """
    State of the dynamic capacity: its bounds, its current value and the
    append-only ``(step, value)`` history.
    """
    c_base: float = 10.0
    c_max: float = 25.0
    current: float = 0.0
    history: List[Tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.c_base <= self.c_max:
            raise PreconditionError(f"Need 0 < c_base <= c_max, got ({self.c_base}, {self.c_max})")

    def record(self, step: int, value: float) -> None:
        if self.history and step <= self.history[-1][0]:
            raise PreconditionError(f"Controller steps must increase: {step} after {self.history[-1][0]}")
        self.current = value
        self.history.append((step, value))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=['step', 'value'])

    def smoothed(self, window: int = 100) -> np.ndarray:
        """Trailing moving average of the history values."""
        return self.to_frame()['value'].rolling(window, min_periods=1).mean().to_numpy()


def compute_c_dyn(e_x0: float, e_xt: float, controller: CDynController, step: Optional[int] = None) -> float:
    """
    ``min(c_base * e_x0 / e_xt, c_max)``, recorded in the controller.

    :param e_x0: entropy of the clean images
    :param e_xt: entropy of the current denoising prediction
    :param controller: the controller to update
    :param step: history step; defaults to one past the last recorded step
    """
    if not (e_x0 > 0 and e_xt > 0):
        raise PreconditionError(f"Entropies must be positive, got e_x0={e_x0}, e_xt={e_xt}")
    if step is None:
        step = controller.history[-1][0] + 1 if controller.history else 1
    value = min(controller.c_base * (e_x0 / e_xt), controller.c_max)
    controller.record(step, value)
    return value


def distillation_loss(z_sem: torch.Tensor, z_disen: torch.Tensor) -> torch.Tensor:
    """
    KL divergence ``sum p * log(p / q)`` between the softmax-normalized
    semantic latent ``p`` and VAE latent ``q`` (floored at 1e-12), averaged
    over the batch.
    """
    if z_sem.shape != z_disen.shape:
        raise PreconditionError(f"Latent shapes differ: {tuple(z_sem.shape)} vs {tuple(z_disen.shape)}")
    p = torch.softmax(z_sem, dim=-1).clamp(min=PROBABILITY_FLOOR)
    q = torch.softmax(z_disen, dim=-1).clamp(min=PROBABILITY_FLOOR)
    return (p * (p.log() - q.log())).sum(dim=-1).mean()


def feedback_loss(vae: VaeModel, x: torch.Tensor, eps: torch.Tensor, c_dyn: float) -> torch.Tensor:
    """The capacity objective of ``vae`` with the capacity set to ``c_dyn``."""
    return capacity_loss(vae, x, eps, c_dyn)


@dataclass
class LossReport:
    step: int
    l_diff: float
    l_dt: float
    l_fd: float
    c_dyn: float
    kl: float
    total: float

    def log_row(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in TRAIN_LOG_COLUMNS}


@dataclass
class ClosedLoopState:
    """
    Everything the closed loop trains and checkpoints as one unit.

    :param diffae: the diffusion autoencoder (semantic encoder, denoiser, schedule)
    :param vae: the co-pilot VAE
    :param controller: the dynamic capacity controller
    :param lambda_dt: weight of the distillation loss
    :param lambda_fd: weight of the feedback loss
    :param optimizer: one AdamW over all trainable parameters
    :param step: global optimizer step, continued across phases
    :param phase: the last phase this state was trained in (0 when fresh)
    """
    diffae: DiffusionAutoencoder
    vae: VaeModel
    controller: CDynController
    lambda_dt: float
    lambda_fd: float
    optimizer: torch.optim.Optimizer
    learning_rate: float
    step: int = 0
    phase: int = 0

    @classmethod
    def create(cls, diffae_config: DiffAeConfig, vae_config: VaeConfig, c_base: float = 10.0, c_max: float = 25.0,
               lambda_dt: float = 1.0, lambda_fd: float = 1.0, learning_rate: float = 2e-4, device: str = 'cpu') -> 'ClosedLoopState':
        if diffae_config.latent_dim != vae_config.latent_dim:
            raise PreconditionError("The VAE latent must have the semantic latent's dimension")
        diffae = DiffusionAutoencoder(diffae_config).to(device)
        vae = VaeModel(vae_config).to(device)
        params = list(diffae.parameters()) + list(vae.parameters())
        optimizer = AdamW(params, lr=learning_rate, weight_decay=0.0)
        return cls(diffae, vae, CDynController(c_base, c_max), lambda_dt, lambda_fd, optimizer, learning_rate)

    @property
    def device(self) -> torch.device:
        return next(self.diffae.parameters()).device

    def parameter_groups(self) -> Dict[str, torch.nn.Module]:
        return {
            'semantic_encoder': self.diffae.encoder,
            'denoiser': self.diffae.denoiser,
            'vae_encoder': self.vae.encoder,
            'vae_decoder': self.vae.decoder,
        }

    def train(self, mode: bool = True) -> None:
        self.diffae.train(mode)
        self.vae.train(mode)

    def save(self, directory: str) -> str:
        """
        Write the state as a manifest, one raw float32 array per parameter and
        optimizer moment, and the controller history as CSV.
        """
        os.makedirs(directory, exist_ok=True)
        entries = {
            'format': CHECKPOINT_FORMAT,
            'step': self.step,
            'phase': self.phase,
            'lambda_dt': float(self.lambda_dt),
            'lambda_fd': float(self.lambda_fd),
            'learning_rate': float(self.learning_rate),
            'controller.c_base': float(self.controller.c_base),
            'controller.c_max': float(self.controller.c_max),
            'controller.current': float(self.controller.current),
            'controller.history_length': len(self.controller.history),
        }
        entries.update({'diffae.' + k: v for k, v in self.diffae.config.to_dict().items()})
        entries.update({'vae.' + k: v for k, v in self.vae.config.to_dict().items()})

        tensors = {'diffae.' + k: v for k, v in self.diffae.state_dict().items()}
        tensors.update({'vae.' + k: v for k, v in self.vae.state_dict().items()})
        for idx, param_state in self.optimizer.state_dict()['state'].items():
            for key, value in param_state.items():
                name = f'optimizer.{idx}.{key}'
                if isinstance(value, torch.Tensor) and value.dtype == torch.float32:
                    tensors[name] = value
                else:
                    entries[name] = float(value)
        entries.update(save_tensors(directory, tensors))
        self.controller.to_frame().to_csv(os.path.join(directory, HISTORY_FILE), index=False)
        return write_manifest(directory, entries)

    @classmethod
    def load(cls, directory: str, device: str = 'cpu') -> 'ClosedLoopState':
        """
        Restore a state written by :meth:`save`.

        :raises DependencyError: if ``directory`` holds no checkpoint
        :raises ManifestError: if the manifest is invalid
        """
        manifest_path = os.path.join(directory, 'manifest')
        if not os.path.isfile(manifest_path):
            raise DependencyError(f"No checkpoint found in {directory}")
        entries = read_manifest(directory)
        if entries.get('format') != CHECKPOINT_FORMAT:
            raise ManifestError("Not a closed-loop checkpoint", key='format', path=manifest_path)
        try:
            diffae_config = DiffAeConfig(
                image_size=parse_shape(entries['diffae.image_size']),
                latent_dim=int(entries['diffae.latent_dim']),
                unet_channels=int(entries['diffae.unet_channels']),
                encoder_channels=int(entries['diffae.encoder_channels']),
                timesteps=int(entries['diffae.timesteps']),
                beta_start=float(entries['diffae.beta_start']),
                beta_end=float(entries['diffae.beta_end']),
            )
            vae_config = VaeConfig(
                image_size=parse_shape(entries['vae.image_size']),
                latent_dim=int(entries['vae.latent_dim']),
                channels=int(entries['vae.channels']),
                beta=float(entries['vae.beta']),
            )
            state = cls.create(
                diffae_config, vae_config,
                c_base=float(entries['controller.c_base']),
                c_max=float(entries['controller.c_max']),
                lambda_dt=float(entries['lambda_dt']),
                lambda_fd=float(entries['lambda_fd']),
                learning_rate=float(entries['learning_rate']),
                device=device,
            )
            state.step = int(entries['step'])
            state.phase = int(entries['phase'])
            state.controller.current = float(entries['controller.current'])
            history_length = int(entries['controller.history_length'])
        except KeyError as e:
            raise ManifestError("Missing entry", key=e.args[0], path=manifest_path) from e
        except ValueError as e:
            raise ManifestError(str(e), path=manifest_path) from e

        tensors = load_tensors(directory, entries)
        state.diffae.load_state_dict({k[len('diffae.'):]: v for k, v in tensors.items() if k.startswith('diffae.')})
        state.vae.load_state_dict({k[len('vae.'):]: v for k, v in tensors.items() if k.startswith('vae.')})

        optimizer_state: Dict[int, Dict[str, object]] = {}
        for key, value in list(tensors.items()) + list(entries.items()):
            if not key.startswith('optimizer.'):
                continue
            _, idx, name = key.split('.', 2)
            optimizer_state.setdefault(int(idx), {})[name] = value if isinstance(value, torch.Tensor) else torch.tensor(float(value))
        if optimizer_state:
            saved = state.optimizer.state_dict()
            saved['state'] = optimizer_state
            state.optimizer.load_state_dict(saved)

        if history_length:
            history = read_table(os.path.join(directory, HISTORY_FILE))
            state.controller.history = [(int(s), float(v)) for s, v in zip(history['step'], history['value'])]
        return state


def step_generator(seed: int, step: int) -> torch.Generator:
    """A generator that depends only on the run seed and the global step."""
    if not 0 <= step < HELD_OUT_STEP:
        raise PreconditionError(f"step must lie in [0, {HELD_OUT_STEP}), got {step}")
    generator = torch.Generator()
    generator.manual_seed(seed * SEED_STRIDE + step)
    return generator


def held_out_generator(seed: int) -> torch.Generator:
    """A generator for evaluation draws, disjoint from every training step's stream."""
    generator = torch.Generator()
    generator.manual_seed(seed * SEED_STRIDE + HELD_OUT_STEP)
    return generator


def _draw_noise(state: ClosedLoopState, x0: torch.Tensor, generator: torch.Generator):
    batch_size = x0.shape[0]
    t = torch.randint(0, state.diffae.schedule.T, (batch_size,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator).to(state.device)
    eps_vae = torch.randn((batch_size, state.vae.latent_dim), generator=generator).to(state.device)
    return t.to(state.device), eps, eps_vae


def _check_finite(report: LossReport) -> None:
    for name in ('l_diff', 'l_dt', 'l_fd', 'kl', 'total'):
        value = getattr(report, name)
        if not math.isfinite(value):
            raise NumericAbort(f"Non-finite {name} ({value}) at step {report.step}: {report}")


def _optimize(state: ClosedLoopState, total: torch.Tensor) -> None:
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step += 1


def phase1_step(state: ClosedLoopState, x0: torch.Tensor, generator: torch.Generator) -> LossReport:
    """
    One pre-training step: the diffusion autoencoder on its denoising loss and
    the VAE on its beta-weighted objective, independently. The distillation
    loss is reported but not optimized.
    """
    x0 = x0.to(state.device)
    t, eps, eps_vae = _draw_noise(state, x0, generator)
    z_sem = state.diffae.encode(x0)
    l_diff, _, _ = denoise(state.diffae.denoiser, x0, z_sem, t, eps, state.diffae.schedule)
    post = state.vae.encode(x0)
    x_hat = state.vae.decode(reparameterize(post, eps_vae))
    l_vae, _, kl = beta_vae_objective(x_hat, x0, post, state.vae.beta)
    with torch.no_grad():
        l_dt = distillation_loss(z_sem, post.mu)
    total = l_diff + l_vae
    report = LossReport(state.step + 1, l_diff.item(), l_dt.item(), l_vae.item(), 0.0, kl.item(), total.item())
    _check_finite(report)
    _optimize(state, total)
    return report


def phase2_step(state: ClosedLoopState, x0: torch.Tensor, generator: Optional[torch.Generator] = None) -> LossReport:
    """
    One closed-loop step on a batch: denoising, entropy-driven capacity
    update, distillation from the VAE posterior mean into the semantic
    latent, capacity feedback into the VAE, and one optimizer step over all
    parameters.

    :return: the step's losses, the capacity used and the weighted total
    """
    if state.phase < 1:
        raise DependencyError("The closed-loop phase needs a pre-trained state")
    if generator is None:
        generator = step_generator(0, state.step)
    x0 = x0.to(state.device)
    t, eps, eps_vae = _draw_noise(state, x0, generator)
    schedule = state.diffae.schedule

    z_sem = state.diffae.encode(x0)
    l_diff, x_t, eps_hat = denoise(state.diffae.denoiser, x0, z_sem, t, eps, schedule)

    with torch.no_grad():
        x0_hat = predict_x0(x_t, eps_hat, t, schedule).clamp(0.0, 1.0)
        e_xt = mean_image_entropy(x0_hat)
        e_x0 = mean_image_entropy(x0)
    c_dyn = compute_c_dyn(e_x0, e_xt, state.controller, state.step + 1)

    post = state.vae.encode(x0)
    l_dt = distillation_loss(z_sem, post.mu.detach())
    x_hat = state.vae.decode(reparameterize(post, eps_vae))
    l_fd, _, kl = capacity_objective(x_hat, x0, post, state.vae.beta, c_dyn)

    total = l_diff + state.lambda_dt * l_dt + state.lambda_fd * l_fd
    report = LossReport(state.step + 1, l_diff.item(), l_dt.item(), l_fd.item(), c_dyn, kl.item(), total.item())
    _check_finite(report)
    _optimize(state, total)
    return report


def _run_phase(state: ClosedLoopState, data: FactorDataset, args: CldisTrainingArguments, target_steps: int,
               step_fn, phase: int, log_path: Optional[str], checkpoint_dir: Optional[str]) -> ClosedLoopState:
    batch_size = min(args.batch_size, len(data))
    batches_per_epoch = math.ceil(len(data) / batch_size)
    epoch, skip = divmod(state.step, batches_per_epoch)
    stream = endless_batches(data, batch_size, seed=args.seed, start_epoch=epoch)
    for _ in range(skip):
        next(stream)

    if state.step >= target_steps:
        logger.warning("State is already at step %d; phase %d target is %d", state.step, phase, target_steps)
    state.phase = max(state.phase, phase)
    state.train()
    pending = []
    while state.step < target_steps:
        report = step_fn(state, next(stream), step_generator(args.seed, state.step))
        pending.append(report.log_row())
        if state.step % args.log_every == 0 or state.step == target_steps:
            logger.info("phase %d step %d: %s", phase, state.step,
                        ', '.join(f"{k}={v:.5g}" for k, v in report.log_row().items() if k != 'step'))
            if log_path is not None:
                append_rows(log_path, pending, TRAIN_LOG_COLUMNS)
            pending = []
        if checkpoint_dir is not None and args.checkpoint_every > 0 and state.step % args.checkpoint_every == 0:
            if log_path is not None:
                append_rows(log_path, pending, TRAIN_LOG_COLUMNS)
            pending = []
            state.save(checkpoint_dir)
            logger.info("Saved checkpoint at step %d to %s", state.step, checkpoint_dir)
    state.train(False)
    return state


def phase1_pretrain(state: ClosedLoopState, data: FactorDataset, args: CldisTrainingArguments,
                    log_path: Optional[str] = None, checkpoint_dir: Optional[str] = None) -> ClosedLoopState:
    """
    Pre-train both branches separately on the same data until the global
    step reaches ``args.phase1_steps``.

    :param state: a fresh or resumed state
    :param data: the training images
    :param args: batch size, target step, seed and logging interval
    :param log_path: ``train_log.csv`` to append one row per step to
    :param checkpoint_dir: where periodic checkpoints go
    """
    logger.info("Pre-training from step %d to %d", state.step, args.phase1_steps)
    return _run_phase(state, data, args, args.phase1_steps, phase1_step, 1, log_path, checkpoint_dir)


def phase2_train(state: ClosedLoopState, data: FactorDataset, args: CldisTrainingArguments,
                 log_path: Optional[str] = None, checkpoint_dir: Optional[str] = None) -> ClosedLoopState:
    """Run closed-loop steps until the global step reaches ``args.phase2_steps``."""
    if state.phase < 1:
        raise DependencyError("The closed-loop phase needs a pre-trained state")
    logger.info("Closed-loop training from step %d to %d (lambda_dt=%s, lambda_fd=%s)",
                state.step, args.phase2_steps, state.lambda_dt, state.lambda_fd)
    return _run_phase(state, data, args, args.phase2_steps, phase2_step, 2, log_path, checkpoint_dir)


def export_c_dyn_curve(state: ClosedLoopState, path: Optional[str] = None) -> pd.DataFrame:
    """
    The controller history as a ``(step, value)`` table, optionally written
    to ``path`` as CSV.
    """
    table = state.controller.to_frame()
    if path is not None:
        table.to_csv(path, index=False)
    return table

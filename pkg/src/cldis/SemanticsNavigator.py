"""
Module containing the self-supervised discovery of interpretable directions
in the semantic latent space: a learnable direction matrix, a predictor that
recovers which direction and how large a shift produced an image pair, and
traversals along the learned directions.
"""
import logging
import os
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn
from torch.optim import AdamW

from .DiffusionAutoencoder import ConvEncoder, DiffusionAutoencoder
from .cldis_args import CldisTrainingArguments
from .cldis_closed_loop import held_out_generator, step_generator
from .cldis_errors import DependencyError, ManifestError, NumericAbort, PreconditionError
from .cldis_io import append_rows, load_tensors, read_manifest, save_tensors, write_manifest

logger = logging.getLogger(__name__)

NAVIGATION_LOG_COLUMNS = ['step', 'loss', 'accuracy', 'delta_error']
NAVIGATOR_FORMAT = 'cldis-navigator'
MIN_SHIFT = 0.5
MAX_SHIFT = 3.0


class DirectionMatrix(nn.Module):
    """
    ``K`` learnable unit-norm directions in a ``D``-dimensional latent space,
    initialized with orthonormal random rows.
    """
    def __init__(self, num_directions: int, latent_dim: int, generator: Optional[torch.Generator] = None):
        super(DirectionMatrix, self).__init__()
        if not 1 <= num_directions <= latent_dim:
            raise PreconditionError(f"Need 1 <= K <= D, got K={num_directions}, D={latent_dim}")
        q, _ = torch.linalg.qr(torch.randn(latent_dim, num_directions, generator=generator))
        self.directions = nn.Parameter(q.T.contiguous())

    @property
    def K(self) -> int:
        return self.directions.shape[0]

    @property
    def D(self) -> int:
        return self.directions.shape[1]

    @torch.no_grad()
    def normalize_(self) -> None:
        self.directions.div_(self.directions.norm(dim=1, keepdim=True))

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        return self.directions[k]


def apply_shift(z: torch.Tensor, k: Union[int, torch.Tensor], delta: Union[float, torch.Tensor], m: DirectionMatrix) -> torch.Tensor:
    """
    ``z + delta * m.directions[k]``. With batched ``k`` and ``delta`` (shape
    ``[B]``) every row of ``z`` is shifted along its own direction.
    """
    if isinstance(k, torch.Tensor) and k.dim() > 0:
        if bool(((k < 0) | (k >= m.K)).any()):
            raise PreconditionError(f"Direction indices must lie in [0, {m.K})")
        delta = torch.as_tensor(delta, dtype=z.dtype, device=z.device)
        if delta.dim() == 0:
            delta = delta.expand(k.shape[0])
        return z + delta[:, None] * m(k.to(z.device))
    k = int(k)
    if not 0 <= k < m.K:
        raise PreconditionError(f"Direction index {k} outside [0, {m.K})")
    return z + delta * m.directions[k]


class ShiftPredictor(nn.Module):
    """
    Reads the channel-concatenated image pair and predicts the direction
    index (``K`` logits) and the signed shift magnitude.
    """
    def __init__(self, image_size: Tuple[int, int, int], num_directions: int, channels: int = 32, hidden: int = 128):
        super(ShiftPredictor, self).__init__()
        c, h, w = image_size
        self.num_directions = num_directions
        self.features = ConvEncoder((2 * c, h, w), hidden, channels)
        self.logits = nn.Linear(hidden, num_directions)
        self.delta = nn.Linear(hidden, 1)

    def forward(self, img, shifted_img):
        h = F.silu(self.features(torch.cat([img, shifted_img], dim=1)))
        return self.logits(h), self.delta(h).squeeze(1)


def navigation_loss(pred_logits: torch.Tensor, pred_delta: torch.Tensor, true_k: torch.Tensor, true_delta: torch.Tensor,
                    lambda_reg: float = 0.25) -> torch.Tensor:
    """Cross-entropy on the direction index plus ``lambda_reg`` times the mean absolute shift error."""
    return F.cross_entropy(pred_logits, true_k) + lambda_reg * (pred_delta - true_delta).abs().mean()


class SemanticsNavigator(nn.Module):
    """
    A frozen diffusion autoencoder together with the direction matrix and
    the shift predictor trained on top of it.

    :param diffae: the trained (frozen) diffusion autoencoder
    :param num_directions: ``K``
    :param lambda_reg: weight of the shift regression term
    :param sample_steps: sampler steps for traversals and figures
    :param navigation_sample_steps: sampler steps for training pairs
    """
    def __init__(self, diffae: DiffusionAutoencoder, num_directions: int = 5, lambda_reg: float = 0.25,
                 sample_steps: int = 50, navigation_sample_steps: int = 20, predictor_channels: int = 32,
                 generator: Optional[torch.Generator] = None):
        super(SemanticsNavigator, self).__init__()
        self.diffae = diffae
        self.diffae.requires_grad_(False)
        self.diffae.eval()
        self.directions = DirectionMatrix(num_directions, diffae.config.latent_dim, generator)
        self.predictor = ShiftPredictor(diffae.config.image_size, num_directions, predictor_channels)
        self.lambda_reg = lambda_reg
        self.sample_steps = sample_steps
        self.navigation_sample_steps = navigation_sample_steps
        self.predictor_channels = predictor_channels
        self.step = 0
        # checkpoint name of the diffusion autoencoder the directions were learned on
        self.source: Optional[str] = None

    @property
    def device(self) -> torch.device:
        return self.directions.directions.device

    def trainable_parameters(self):
        return list(self.directions.parameters()) + list(self.predictor.parameters())

    def save(self, directory: str) -> str:
        """Write ``directions.f32``, the predictor parameters and a manifest with ``K`` and ``D``."""
        tensors = {'directions': self.directions.directions.detach()}
        tensors.update({'predictor.' + k: v for k, v in self.predictor.state_dict().items()})
        entries = {
            'format': NAVIGATOR_FORMAT,
            'K': self.directions.K,
            'D': self.directions.D,
            'step': self.step,
            'lambda_reg': float(self.lambda_reg),
            'sample_steps': self.sample_steps,
            'navigation_sample_steps': self.navigation_sample_steps,
            'predictor_channels': self.predictor_channels,
        }
        if self.source is not None:
            entries['source'] = self.source
        entries.update(save_tensors(directory, tensors))
        return write_manifest(directory, entries)

    @classmethod
    def load(cls, directory: str, diffae: DiffusionAutoencoder) -> 'SemanticsNavigator':
        manifest_path = os.path.join(directory, 'manifest')
        if not os.path.isfile(manifest_path):
            raise DependencyError(f"No learned directions found in {directory}")
        entries = read_manifest(directory)
        if entries.get('format') != NAVIGATOR_FORMAT:
            raise ManifestError("Not a navigator checkpoint", key='format', path=manifest_path)
        try:
            navigator = cls(
                diffae,
                num_directions=int(entries['K']),
                lambda_reg=float(entries['lambda_reg']),
                sample_steps=int(entries['sample_steps']),
                navigation_sample_steps=int(entries['navigation_sample_steps']),
                predictor_channels=int(entries['predictor_channels']),
            )
            navigator.step = int(entries['step'])
            navigator.source = entries.get('source')
            latent_dim = int(entries['D'])
        except KeyError as e:
            raise ManifestError("Missing entry", key=e.args[0], path=manifest_path) from e
        except ValueError as e:
            raise ManifestError(str(e), path=manifest_path) from e
        if latent_dim != diffae.config.latent_dim:
            raise ManifestError(f"Directions have dimension {latent_dim}, the model {diffae.config.latent_dim}", key='D', path=manifest_path)
        tensors = load_tensors(directory, entries)
        navigator.to(diffae_device(diffae))
        with torch.no_grad():
            navigator.directions.directions.copy_(tensors['directions'])
        navigator.predictor.load_state_dict({k[len('predictor.'):]: v for k, v in tensors.items() if k.startswith('predictor.')})
        return navigator


def diffae_device(diffae: DiffusionAutoencoder) -> torch.device:
    return next(diffae.parameters()).device


def make_training_pair(navigator: SemanticsNavigator, x0: torch.Tensor, k, delta, shared_x_T: torch.Tensor,
                       steps: Optional[int] = None, grad: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Decode the semantic latent of ``x0`` and its shifted copy from the same
    starting noise.

    :param steps: sampler steps (defaults to the navigation schedule)
    :param grad: keep the graph from the shifted image back to the directions
    :return: ``(image, shifted_image)``
    """
    steps = steps or navigator.navigation_sample_steps
    diffae = navigator.diffae
    with torch.no_grad():
        z = diffae.encode(x0)
        image = diffae.decode(z, shared_x_T, steps)
    with torch.set_grad_enabled(grad):
        z_shift = apply_shift(z, k, delta, navigator.directions)
        shifted = diffae.decode(z_shift, shared_x_T, steps, grad=grad)
    return image, shifted


def sample_shifts(num: int, num_directions: int, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Direction indices uniform over ``K`` and signed magnitudes with ``0.5 <= |delta| <= 3``."""
    k = torch.randint(0, num_directions, (num,), generator=generator)
    magnitude = MIN_SHIFT + (MAX_SHIFT - MIN_SHIFT) * torch.rand(num, generator=generator)
    sign = torch.randint(0, 2, (num,), generator=generator).float() * 2 - 1
    return k, sign * magnitude


def _navigation_batch(navigator, images, batch_size, generator, grad):
    index = torch.randint(0, images.shape[0], (batch_size,), generator=generator)
    x0 = images[index].to(navigator.device)
    k, delta = sample_shifts(batch_size, navigator.directions.K, generator)
    x_T = torch.randn(x0.shape, generator=generator).to(navigator.device)
    k, delta = k.to(navigator.device), delta.to(navigator.device)
    image, shifted = make_training_pair(navigator, x0, k, delta, x_T, grad=grad)
    logits, pred_delta = navigator.predictor(image, shifted)
    return logits, pred_delta, k, delta


def train_navigation(navigator: SemanticsNavigator, images: torch.Tensor, args: CldisTrainingArguments,
                     log_path: Optional[str] = None) -> Tuple[DirectionMatrix, ShiftPredictor]:
    """
    Train the directions and the predictor for ``args.phase3_steps`` steps on
    pairs generated by the frozen diffusion autoencoder. Direction rows are
    re-normalized after every step.

    :param navigator: the navigator to train in place
    :param images: ``[M, C, H, W]`` source images
    :param args: batch size, step count, seed and learning rate
    :param log_path: ``navigation_log.csv`` to append one row per step to
    :return: the trained direction matrix and predictor
    """
    optimizer = AdamW(navigator.trainable_parameters(), lr=args.navigation_learning_rate, weight_decay=0.0)
    batch_size = min(args.batch_size, images.shape[0])
    navigator.predictor.train()
    pending = []
    logger.info("Training %d directions for %d steps", navigator.directions.K, args.phase3_steps)
    for _ in range(args.phase3_steps):
        generator = step_generator(args.seed, navigator.step)
        logits, pred_delta, k, delta = _navigation_batch(navigator, images, batch_size, generator, grad=True)
        loss = navigation_loss(logits, pred_delta, k, delta, navigator.lambda_reg)
        if not torch.isfinite(loss):
            raise NumericAbort(f"Non-finite navigation loss at step {navigator.step + 1}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        navigator.directions.normalize_()
        navigator.step += 1

        row = {
            'step': navigator.step,
            'loss': loss.item(),
            'accuracy': (logits.argmax(dim=1) == k).float().mean().item(),
            'delta_error': (pred_delta - delta).abs().mean().item(),
        }
        pending.append(row)
        if navigator.step % args.log_every == 0:
            logger.info("navigation step %d: loss=%.5g accuracy=%.3f delta_error=%.4g",
                        row['step'], row['loss'], row['accuracy'], row['delta_error'])
            if log_path is not None:
                append_rows(log_path, pending, NAVIGATION_LOG_COLUMNS)
            pending = []
    if log_path is not None:
        append_rows(log_path, pending, NAVIGATION_LOG_COLUMNS)
    navigator.predictor.eval()
    return navigator.directions, navigator.predictor


@torch.no_grad()
def direction_accuracy(navigator: SemanticsNavigator, images: torch.Tensor, num_pairs: int, seed: int,
                       batch_size: int = 32) -> Tuple[float, float]:
    """
    Held-out direction classification accuracy and mean absolute shift error
    of the predictor on freshly generated pairs.
    """
    generator = held_out_generator(seed)
    navigator.predictor.eval()
    correct, error, seen = 0.0, 0.0, 0
    while seen < num_pairs:
        size = min(batch_size, num_pairs - seen)
        logits, pred_delta, k, delta = _navigation_batch(navigator, images, size, generator, grad=False)
        correct += (logits.argmax(dim=1) == k).sum().item()
        error += (pred_delta - delta).abs().sum().item()
        seen += size
    return correct / num_pairs, error / num_pairs


@torch.no_grad()
def traverse(navigator: SemanticsNavigator, x0: torch.Tensor, k: int, magnitudes: Sequence[float],
             x_T: Optional[torch.Tensor] = None, steps: Optional[int] = None) -> List[torch.Tensor]:
    """
    Decode ``x0`` shifted along direction ``k`` by each magnitude, all from
    the same starting noise (by default the inverted noise of ``x0``).

    :return: one ``[C, H, W]`` image per magnitude; magnitude 0 is the plain
        reconstruction
    """
    steps = steps or navigator.sample_steps
    diffae = navigator.diffae
    if x0.dim() == 3:
        x0 = x0[None]
    x0 = x0.to(navigator.device)
    z = diffae.encode(x0)
    if x_T is None:
        x_T = diffae.invert(x0, z, steps)
    return [diffae.decode(apply_shift(z, k, float(m), navigator.directions), x_T, steps)[0] for m in magnitudes]

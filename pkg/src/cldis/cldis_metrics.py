"""
Module containing the disentanglement metrics computed against the ground
truth factors (FactorVAE score, DCI), the locality heatmap of a latent
direction and the construction of latent-shift image pairs.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.linear_model import Ridge
from sklearn.model_selection import train_test_split

from .SemanticsNavigator import SemanticsNavigator, apply_shift
from .cldis_data import FactorDataset
from .cldis_errors import PreconditionError

logger = logging.getLogger(__name__)

EPS = 1e-11
Encoder = Callable[[torch.Tensor], object]


def encode_dataset(encode: Encoder, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Run ``encode`` over ``images`` in batches and stack the latents as float64."""
    latents = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            z = encode(images[start:start + batch_size])
            if isinstance(z, torch.Tensor):
                z = z.detach().cpu().numpy()
            latents.append(np.asarray(z, dtype=np.float64))
    return np.concatenate(latents, axis=0)


def make_oracle_encoder(dataset: FactorDataset) -> Encoder:
    """
    An encoder that returns the true factor indices of dataset images, for
    checking the metrics against perfect disentanglement.
    """
    lookup = {dataset.images[i].tobytes(): dataset.factor_values[i] for i in range(len(dataset))}

    def encode(images: torch.Tensor) -> np.ndarray:
        array = images.detach().cpu().numpy().astype(np.float32)
        try:
            return np.stack([lookup[image.tobytes()] for image in array]).astype(np.float64)
        except KeyError:
            raise PreconditionError("The oracle encoder only knows images of its own dataset")

    return encode


def _standardized(latents: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    std = latents.std(axis=0)
    keep = std > 0
    if not keep.all():
        logger.warning("Excluding %d latent dimensions with zero variance", int((~keep).sum()))
    return keep, std


def _votes(latents: np.ndarray, dataset: FactorDataset, count: int, group_size: int, rng: np.random.Generator):
    votes = []
    num_factors = dataset.spec.num_factors
    for _ in range(count):
        factor = int(rng.integers(num_factors))
        value = int(rng.integers(dataset.spec.cardinalities[factor]))
        candidates = dataset.indices_with_factor(factor, value)
        if candidates.size == 0:
            raise PreconditionError(f"No image has {dataset.spec.names[factor]}={value}; use an exhaustive dataset")
        group = rng.choice(candidates, size=group_size, replace=True)
        votes.append((factor, int(np.argmin(latents[group].var(axis=0)))))
    return votes


def factor_vae_score(encode: Encoder, data: FactorDataset, votes: int = 800, group_size: int = 64, seed: int = 0) -> float:
    """
    FactorVAE score: for each vote one factor is fixed to a random value, a
    group of images sharing it is encoded, latents are divided by their
    global standard deviation and the dimension of least variance within
    the group votes for the fixed factor. A majority-vote classifier from
    dimensions to factors is built on ``votes`` votes and scored on
    ``votes // 2`` held-out votes.

    :param encode: maps a ``[B, C, H, W]`` batch to ``[B, D]`` latents
    :param data: a dataset with ground-truth factors
    :param votes: number of training votes
    :param group_size: images per vote
    :param seed: sampling seed
    :return: held-out classifier accuracy in [0, 1]
    """
    if votes < 2 or group_size < 2:
        raise PreconditionError("factor_vae_score needs at least 2 votes and groups of at least 2")
    latents = encode_dataset(encode, data.image_tensor())
    keep, std = _standardized(latents)
    if not keep.any():
        raise PreconditionError("Every latent dimension has zero variance")
    normalized = latents[:, keep] / std[keep]

    rng = np.random.default_rng(seed)
    train_votes = _votes(normalized, data, votes, group_size, rng)
    test_votes = _votes(normalized, data, votes // 2, group_size, rng)

    counts = np.zeros((data.spec.num_factors, normalized.shape[1]), dtype=np.int64)
    for factor, dim in train_votes:
        counts[factor, dim] += 1
    classifier = np.argmax(counts, axis=0)
    accuracy = float(np.mean([classifier[dim] == factor for factor, dim in test_votes]))
    logger.info("FactorVAE score %.4f (%d train / %d test votes)", accuracy, len(train_votes), len(test_votes))
    return accuracy


@dataclass
class DciResult:
    disentanglement: float
    completeness: float
    informativeness: float
    importance: np.ndarray


def _entropy_scores(probs: np.ndarray, base: int) -> np.ndarray:
    # 1 - normalized entropy of each row
    if base < 2:
        return np.ones(probs.shape[0])
    return 1.0 + np.sum(probs * np.log(probs + EPS), axis=1) / np.log(base)


def importance_matrix(latents: np.ndarray, factors: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """
    ``[D, N]`` absolute coefficients of per-factor ridge regressions on
    standardized latents and factors. Constant latent dimensions get zero
    importance.
    """
    keep = latents.std(axis=0) > 0
    x = np.zeros_like(latents, dtype=np.float64)
    x[:, keep] = (latents[:, keep] - latents[:, keep].mean(axis=0)) / latents[:, keep].std(axis=0)
    importance = np.zeros((latents.shape[1], factors.shape[1]))
    for n in range(factors.shape[1]):
        y = factors[:, n].astype(np.float64)
        if y.std() == 0:
            continue
        y = (y - y.mean()) / y.std()
        regressor = Ridge(alpha=alpha, solver='cholesky').fit(x, y)
        importance[:, n] = np.abs(regressor.coef_)
    importance[~keep] = 0.0
    return importance


def _informativeness(latents: np.ndarray, factors: np.ndarray, alpha: float, seed: int) -> float:
    x_train, x_test, y_train, y_test = train_test_split(latents, factors.astype(np.float64), test_size=0.2, random_state=seed)
    scores = []
    for n in range(factors.shape[1]):
        if y_test[:, n].std() == 0:
            continue
        regressor = Ridge(alpha=alpha, solver='cholesky').fit(x_train, y_train[:, n])
        scores.append(regressor.score(x_test, y_test[:, n]))
    return float(np.mean(scores)) if scores else 0.0


def dci_scores(latents: np.ndarray, factors: np.ndarray, alpha: float = 1.0, seed: int = 0) -> DciResult:
    """
    DCI disentanglement, completeness and informativeness of ``latents``
    with respect to ``factors``.

    :param latents: ``[M, D]`` codes
    :param factors: ``[M, N]`` ground-truth factor values
    :param alpha: ridge regularization strength
    :param seed: seed of the informativeness train/test split
    """
    latents = np.asarray(latents, dtype=np.float64)
    factors = np.asarray(factors)
    if latents.shape[0] != factors.shape[0]:
        raise PreconditionError("latents and factors must have the same number of rows")
    if latents.shape[0] < 100:
        raise PreconditionError(f"DCI needs at least 100 samples, got {latents.shape[0]}")
    importance = importance_matrix(latents, factors, alpha)
    num_latents, num_factors = importance.shape
    total = importance.sum()
    informativeness = _informativeness(latents, factors, alpha, seed)
    if total <= EPS or informativeness < 0.05:
        logger.warning("Degenerate DCI input: importance mass %.3g, mean R^2 %.3g", total, informativeness)
    if total <= EPS:
        return DciResult(0.0, 0.0, informativeness, importance)

    latent_mass = importance.sum(axis=1)
    rows = importance / (latent_mass[:, None] + EPS)
    disentanglement = float(np.sum(_entropy_scores(rows, num_factors) * latent_mass / total))

    factor_mass = importance.sum(axis=0)
    columns = (importance / (factor_mass[None, :] + EPS)).T
    completeness = float(np.sum(_entropy_scores(columns, num_latents) * factor_mass / total))
    return DciResult(disentanglement, completeness, informativeness, importance)


def dci_disentanglement(latents: np.ndarray, factors: np.ndarray) -> Tuple[float, np.ndarray]:
    """:return: the DCI disentanglement score and the ``[D, N]`` importance matrix"""
    result = dci_scores(latents, factors)
    return result.disentanglement, result.importance


def axis_navigator(navigator_or_diffae, num_directions: int) -> SemanticsNavigator:
    """
    A navigator whose directions are the first ``num_directions`` unit latent
    axes, for models without learned directions.
    """
    diffae = getattr(navigator_or_diffae, 'diffae', navigator_or_diffae)
    navigator = SemanticsNavigator(diffae, num_directions=num_directions)
    with torch.no_grad():
        navigator.directions.directions.copy_(torch.eye(diffae.config.latent_dim)[:num_directions])
    return navigator.to(next(diffae.parameters()).device)


def default_heatmap_magnitudes(max_shift: float = 3.0, count: int = 20) -> List[float]:
    return np.linspace(-max_shift, max_shift, count).tolist()


@torch.no_grad()
def locality_heatmap(navigator: SemanticsNavigator, z: torch.Tensor, k: int, magnitudes: Sequence[float],
                     x_T: torch.Tensor, steps: Optional[int] = None) -> np.ndarray:
    """
    Mean over ``magnitudes`` of the per-pixel absolute difference between the
    generation shifted along direction ``k`` and the unshifted one, averaged
    over channels.

    :param z: ``[D]`` or ``[1, D]`` semantic latent
    :param x_T: the shared ``[1, C, H, W]`` or ``[C, H, W]`` starting noise
    :return: ``[H, W]`` nonnegative heatmap
    """
    steps = steps or navigator.sample_steps
    diffae = navigator.diffae
    z = z.reshape(1, -1).to(navigator.device)
    x_T = x_T.reshape(1, *x_T.shape[-3:]).to(navigator.device)
    count = len(magnitudes)
    base = diffae.decode(z, x_T, steps)
    shifted_z = torch.cat([apply_shift(z, k, float(m), navigator.directions) for m in magnitudes])
    shifted = diffae.decode(shifted_z, x_T.expand(count, -1, -1, -1), steps)
    return (shifted - base).abs().mean(dim=1).mean(dim=0).cpu().numpy().astype(np.float64)


@torch.no_grad()
def make_shift_pairs(navigator: SemanticsNavigator, images: torch.Tensor, num_pairs: int = 100, magnitude: float = 2.0,
                     seed: int = 0, x_t_mode: str = 'inverted', steps: Optional[int] = None,
                     batch_size: int = 25) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Pairs of generations without and with a latent shift of fixed magnitude;
    pair ``i`` uses direction ``i mod K`` and a seeded random source image.

    :param x_t_mode: ``inverted`` starts both generations from the inverted
        noise of the source image, ``noise`` from seeded Gaussian noise
    :return: ``num_pairs`` ``([C, H, W], [C, H, W])`` numpy pairs
    """
    if x_t_mode not in ('inverted', 'noise'):
        raise PreconditionError(f"Unknown x_T mode {x_t_mode!r}")
    steps = steps or navigator.sample_steps
    diffae = navigator.diffae
    generator = torch.Generator()
    generator.manual_seed(seed)
    index = torch.randint(0, images.shape[0], (num_pairs,), generator=generator)
    noise = torch.randn((num_pairs,) + tuple(images.shape[1:]), generator=generator)
    directions = torch.arange(num_pairs) % navigator.directions.K

    pairs = []
    for start in range(0, num_pairs, batch_size):
        sl = slice(start, min(start + batch_size, num_pairs))
        x0 = images[index[sl]].to(navigator.device)
        z = diffae.encode(x0)
        x_T = diffae.invert(x0, z, steps) if x_t_mode == 'inverted' else noise[sl].to(navigator.device)
        base = diffae.decode(z, x_T, steps)
        shifted = diffae.decode(apply_shift(z, directions[sl].to(navigator.device), magnitude, navigator.directions), x_T, steps)
        pairs.extend(zip(base.cpu().numpy(), shifted.cpu().numpy()))
    return pairs

"""
Module containing the dense optical flow estimator and the flow-ratio
locality metric built on it.

Flow follows the backward-warping convention: for a flow field ``F``
estimated from ``(img_a, img_b)``, ``img_b(p + F(p)) ~= img_a(p)``, so a
shape translated two pixels to the right has flow ``(2, 0)`` on its pixels.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.ndimage import convolve, correlate1d, gaussian_filter, map_coordinates, zoom

from .cldis_errors import PreconditionError

logger = logging.getLogger(__name__)

# FlowField: float64 array [H, W, 2] of (dx, dy) pixel displacements
FlowField = np.ndarray

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
AVERAGING_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                             [1 / 6, 0.0, 1 / 6],
                             [1 / 12, 1 / 6, 1 / 12]])
CENTRAL_DIFFERENCE = np.array([-0.5, 0.0, 0.5])


@dataclass(frozen=True)
class FlowParams:
    """
    Parameters of the coarse-to-fine Horn-Schunck estimator.

    :param alpha: smoothness weight
    :param iterations: maximum iterations per pyramid level
    :param tolerance: stop once the mean per-pixel update falls below this
    :param sigma: Gaussian pre-smoothing applied at every pyramid level
    :param levels: maximum number of pyramid levels
    :param intensity_scale: intensities in [0, 1] are multiplied by this
        before estimation (8-bit range)
    :param min_size: coarsest level side length
    """
    alpha: float = 1.0
    iterations: int = 100
    tolerance: float = 1e-4
    sigma: float = 1.0
    levels: int = 3
    intensity_scale: float = 255.0
    min_size: int = 8


def to_grayscale(image) -> np.ndarray:
    """``[C, H, W]`` (numpy or torch) in [0, 1] to a float64 ``[H, W]`` array."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise PreconditionError(f"Expected a [C, H, W] image with C in {{1, 3}}, got shape {image.shape}")
    if image.shape[0] == 1:
        return image[0]
    return np.tensordot(LUMA_WEIGHTS, image, axes=1)


def _derivatives(img_a: np.ndarray, img_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = 0.5 * (img_a + img_b)
    fx = correlate1d(mean, CENTRAL_DIFFERENCE, axis=1, mode='mirror')
    fy = correlate1d(mean, CENTRAL_DIFFERENCE, axis=0, mode='mirror')
    ft = img_b - img_a
    return fx, fy, ft


def _warp(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # sample image at p + flow(p)
    rows, cols = np.mgrid[0:image.shape[0], 0:image.shape[1]].astype(np.float64)
    return map_coordinates(image, [rows + v, cols + u], order=1, mode='nearest')


def horn_schunck(img_a: np.ndarray, img_b: np.ndarray, alpha: float, iterations: int, tolerance: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Single-scale Horn-Schunck iterations starting from zero flow.

    :return: ``(u, v)`` horizontal and vertical displacements
    """
    fx, fy, ft = _derivatives(img_a, img_b)
    u = np.zeros_like(img_a)
    v = np.zeros_like(img_a)
    denominator = alpha ** 2 + fx ** 2 + fy ** 2
    for _ in range(iterations):
        u_avg = convolve(u, AVERAGING_KERNEL, mode='mirror')
        v_avg = convolve(v, AVERAGING_KERNEL, mode='mirror')
        der = (fx * u_avg + fy * v_avg + ft) / denominator
        u_new = u_avg - fx * der
        v_new = v_avg - fy * der
        update = np.mean(np.hypot(u_new - u, v_new - v))
        u, v = u_new, v_new
        if update < tolerance:
            break
    return u, v


def _pyramid(image: np.ndarray, params: FlowParams) -> List[np.ndarray]:
    levels = [gaussian_filter(image, params.sigma, mode='nearest')]
    while len(levels) < params.levels and min(levels[-1].shape) // 2 >= params.min_size:
        smaller = zoom(gaussian_filter(levels[-1], params.sigma, mode='nearest'), 0.5, order=1)
        levels.append(smaller)
    return levels


def estimate_flow(img_a, img_b, params: FlowParams = FlowParams()) -> FlowField:
    """
    Estimate the dense flow from ``img_a`` to ``img_b`` coarse-to-fine, with
    backward warping of ``img_b`` at every level. Color images are converted
    to grayscale first.

    :param img_a: ``[C, H, W]`` source image in [0, 1]
    :param img_b: ``[C, H, W]`` target image in [0, 1]
    :param params: estimator parameters
    :return: ``[H, W, 2]`` float64 flow
    """
    a = to_grayscale(img_a) * params.intensity_scale
    b = to_grayscale(img_b) * params.intensity_scale
    if a.shape != b.shape:
        raise PreconditionError(f"Image shapes differ: {a.shape} vs {b.shape}")

    pyramid_a = _pyramid(a, params)
    pyramid_b = _pyramid(b, params)
    u = np.zeros_like(pyramid_a[-1])
    v = np.zeros_like(pyramid_a[-1])
    for level_a, level_b in zip(reversed(pyramid_a), reversed(pyramid_b)):
        if u.shape != level_a.shape:
            factors = (level_a.shape[0] / u.shape[0], level_a.shape[1] / u.shape[1])
            u = zoom(u, factors, order=1) * factors[1]
            v = zoom(v, factors, order=1) * factors[0]
        # a single warp per level
        warped = _warp(level_b, u, v)
        du, dv = horn_schunck(level_a, warped, params.alpha, params.iterations, params.tolerance)
        u, v = u + du, v + dv
    flow = np.stack([u, v], axis=-1)
    if not np.all(np.isfinite(flow)):
        raise PreconditionError("Flow estimation produced non-finite values")
    return flow


def flow_norms(flow: FlowField) -> np.ndarray:
    return np.sqrt(np.sum(flow ** 2, axis=-1))


def normalize_flow(flow: FlowField) -> FlowField:
    """
    Divide every vector by the largest per-pixel norm. An all-zero field is
    returned unchanged.
    """
    max_norm = float(np.max(flow_norms(flow)))
    if max_norm == 0.0:
        logger.warning("All-zero flow field; skipping normalization")
        return flow.copy()
    return flow / max_norm


def flow_ratio_from_flow(flow: FlowField, threshold: float = 0.5) -> float:
    """
    Ratio of pixels whose normalized flow norm exceeds ``threshold`` to those
    at or below it. Returns ``inf`` (with a warning) when no pixel is at or
    below the threshold.
    """
    if not 0 < threshold < 1:
        raise PreconditionError(f"threshold must lie in (0, 1), got {threshold}")
    norms = flow_norms(normalize_flow(flow))
    moving = int(np.count_nonzero(norms > threshold))
    still = norms.size - moving
    if still == 0:
        logger.warning("Every pixel moves more than the threshold %s; scoring the pair as inf", threshold)
        return float('inf')
    return moving / still


def flow_ratio_metric(img, shifted_img, threshold: float = 0.5, params: FlowParams = FlowParams()) -> float:
    """
    Locality score of an edit: the flow ratio between an image and its
    latent-shifted generation. Smaller is better; identical images score 0.
    """
    if not 0 < threshold < 1:
        raise PreconditionError(f"threshold must lie in (0, 1), got {threshold}")
    return flow_ratio_from_flow(estimate_flow(img, shifted_img, params), threshold)


def mean_finite(scores: Iterable[float]) -> Tuple[float, int]:
    """
    :return: the mean of the finite scores (``inf`` if there are none) and the
        number of infinite ones
    """
    scores = np.asarray(list(scores), dtype=np.float64)
    finite = scores[np.isfinite(scores)]
    infinite = int(scores.size - finite.size)
    if finite.size == 0:
        return float('inf'), infinite
    return float(finite.mean()), infinite


def flow_pair_scores(pairs: Sequence[Tuple[object, object]], threshold: float = 0.5,
                     params: FlowParams = FlowParams()) -> List[float]:
    return [flow_ratio_metric(a, b, threshold, params) for a, b in pairs]


def average_flow_metric(pairs: Sequence[Tuple[object, object]], threshold: float = 0.5,
                        params: FlowParams = FlowParams()) -> float:
    """
    Mean flow-ratio score over image pairs; ``inf`` sentinels are left out of
    the mean and reported in the log.
    """
    if len(pairs) == 0:
        raise PreconditionError("average_flow_metric needs at least one pair")
    mean, infinite = mean_finite(flow_pair_scores(pairs, threshold, params))
    if infinite:
        logger.warning("%d of %d pairs scored inf and were excluded from the mean", infinite, len(pairs))
    return mean


def flow_threshold_curve(pairs: Sequence[Tuple[object, object]], thresholds: Sequence[float],
                         params: FlowParams = FlowParams()) -> pd.DataFrame:
    """
    Mean flow-ratio score as a function of the threshold, estimating each
    pair's flow once.

    :return: a table with columns ``threshold``, ``mean_score`` and ``infinite_pairs``
    """
    if len(pairs) == 0:
        raise PreconditionError("flow_threshold_curve needs at least one pair")
    return threshold_curve_from_flows([estimate_flow(a, b, params) for a, b in pairs], thresholds)


def threshold_curve_from_flows(flows: Sequence[FlowField], thresholds: Sequence[float]) -> pd.DataFrame:
    rows = []
    for threshold in thresholds:
        mean, infinite = mean_finite(flow_ratio_from_flow(flow, threshold) for flow in flows)
        rows.append({'threshold': float(threshold), 'mean_score': mean, 'infinite_pairs': infinite})
    return pd.DataFrame(rows, columns=['threshold', 'mean_score', 'infinite_pairs'])

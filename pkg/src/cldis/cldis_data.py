"""
Module containing the procedurally generated factor datasets: small 2D
scenes of one colored shape whose shape, scale, position and color are the
known generative factors.
"""
import colorsys
import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel
from torch.utils.data import DataLoader
from torch.utils.data.dataset import Dataset

from .cldis_errors import ManifestError, PreconditionError
from .cldis_io import (
    FLOAT_DTYPE,
    INT_DTYPE,
    parse_shape,
    read_manifest,
    read_raw_array,
    validate_manifest,
    write_manifest,
    write_raw_array,
)

logger = logging.getLogger(__name__)

FACTOR_NAMES = ('shape', 'scale', 'pos_x', 'pos_y', 'color')
SHAPES = ('square', 'ellipse', 'triangle')
MIN_SCALE = 0.4
MAX_SCALE = 0.85
DATASET_FORMAT = 'cldis-factor-dataset'


@dataclass(frozen=True)
class FactorSpec:
    """
    The generative factors of a dataset and the size of its images.

    :param factors: ordered ``(name, cardinality)`` pairs
    :param image_size: ``(C, H, W)`` with ``C`` in ``{1, 3}``
    """
    factors: Tuple[Tuple[str, int], ...]
    image_size: Tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, 'factors', tuple((str(n), int(c)) for n, c in self.factors))
        object.__setattr__(self, 'image_size', tuple(int(s) for s in self.image_size))
        if len(self.image_size) != 3 or self.image_size[0] not in (1, 3):
            raise PreconditionError(f"image_size must be (C, H, W) with C in {{1, 3}}, got {self.image_size}")
        if min(self.image_size[1:]) < 8:
            raise PreconditionError(f"Images must be at least 8x8 pixels, got {self.image_size}")
        if self.names != FACTOR_NAMES:
            raise PreconditionError(f"Factors must be {FACTOR_NAMES} in this order, got {self.names}")
        for name, cardinality in self.factors:
            if cardinality < 2:
                raise PreconditionError(f"Factor {name} has cardinality {cardinality}; every factor needs at least 2 values")
        if self.cardinality('shape') > len(SHAPES):
            raise PreconditionError(f"At most {len(SHAPES)} shapes can be rendered")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.factors)

    @property
    def cardinalities(self) -> Tuple[int, ...]:
        return tuple(cardinality for _, cardinality in self.factors)

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def size(self) -> int:
        """Number of distinct factor tuples, i.e. the exhaustive dataset size."""
        return int(np.prod(self.cardinalities))

    def cardinality(self, name: str) -> int:
        return dict(self.factors)[name]

    def describe(self) -> str:
        return ','.join(f"{name}:{cardinality}" for name, cardinality in self.factors)

    @classmethod
    def parse(cls, factors: str, image_size: str) -> 'FactorSpec':
        pairs = []
        for item in factors.split(','):
            name, _, cardinality = item.partition(':')
            pairs.append((name, int(cardinality)))
        return cls(tuple(pairs), parse_shape(image_size))

    @classmethod
    def from_cardinalities(cls, cardinalities: Sequence[int], image_size: Sequence[int]) -> 'FactorSpec':
        if len(cardinalities) != len(FACTOR_NAMES):
            raise PreconditionError(f"Expected {len(FACTOR_NAMES)} cardinalities, got {len(cardinalities)}")
        return cls(tuple(zip(FACTOR_NAMES, cardinalities)), tuple(image_size))


def default_spec() -> FactorSpec:
    """The canonical toy spec: 3 shapes, 4 scales, 8x8 positions and 4 colors on 3x32x32 images."""
    return FactorSpec.from_cardinalities((3, 4, 8, 8, 4), (3, 32, 32))


def _palette(spec: FactorSpec) -> np.ndarray:
    count = spec.cardinality('color')
    if spec.image_size[0] == 1:
        return np.linspace(0.4, 1.0, count)[:, None]
    return np.array([colorsys.hsv_to_rgb(i / count, 1.0, 1.0) for i in range(count)])


def _geometry(spec: FactorSpec):
    _, height, width = spec.image_size
    # radius = scale * half-width / 2, so scale is the diameter relative to the half-width
    unit = min(height, width) / 4.0
    radii = np.linspace(MIN_SCALE, MAX_SCALE, spec.cardinality('scale')) * unit
    r_max = radii[-1]
    xs = np.linspace(r_max, width - r_max, spec.cardinality('pos_x'))
    ys = np.linspace(r_max, height - r_max, spec.cardinality('pos_y'))
    return radii, xs, ys


def render_scene(spec: FactorSpec, factor_values: Sequence[int]) -> np.ndarray:
    """
    Rasterize one shape without anti-aliasing.

    :param spec: the dataset spec
    :param factor_values: one index per factor, in spec order
    :return: a ``[C, H, W]`` float32 image in [0, 1]
    """
    values = np.asarray(factor_values)
    if values.shape != (spec.num_factors,):
        raise PreconditionError(f"Expected {spec.num_factors} factor values, got shape {values.shape}")
    for (name, cardinality), value in zip(spec.factors, values):
        if not 0 <= value < cardinality:
            raise PreconditionError(f"Factor {name} value {value} is outside [0, {cardinality})")
    shape, scale, pos_x, pos_y, color = (int(v) for v in values)

    channels, height, width = spec.image_size
    radii, xs, ys = _geometry(spec)
    r = radii[scale]
    # pixel centers
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dx = xx - xs[pos_x]
    dy = yy - ys[pos_y]

    if SHAPES[shape] == 'square':
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif SHAPES[shape] == 'ellipse':
        mask = (dx / r) ** 2 + (dy / (0.6 * r)) ** 2 <= 1.0
    else:
        # apex at the top, base at the bottom
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)

    palette = _palette(spec)
    image = mask[None].astype(np.float64) * palette[color][:, None, None]
    return image.astype(np.float32)


@dataclass(frozen=True, eq=False)
class FactorDataset(Dataset):
    """
    Images paired with their ground-truth factor indices. Instances are
    immutable; the arrays are marked read-only.

    :param spec: the spec the dataset was generated from
    :param images: ``[M, C, H, W]`` float32 array in [0, 1]
    :param factor_values: ``[M, N]`` int32 array of factor indices
    """
    spec: FactorSpec
    images: np.ndarray
    factor_values: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.factor_values.shape[0]:
            raise PreconditionError("images and factor_values must have the same number of rows")
        if tuple(self.images.shape[1:]) != self.spec.image_size:
            raise PreconditionError(f"images have shape {self.images.shape[1:]}, spec says {self.spec.image_size}")
        if self.factor_values.shape[1] != self.spec.num_factors:
            raise PreconditionError("factor_values must have one column per factor")
        self.images.setflags(write=False)
        self.factor_values.setflags(write=False)

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i):
        return torch.tensor(self.images[i]), torch.tensor(self.factor_values[i], dtype=torch.long)

    @property
    def is_exhaustive(self) -> bool:
        return len(self) == self.spec.size and np.array_equal(self.factor_values, _grid(self.spec))

    def image_tensor(self, indices: Optional[Sequence[int]] = None) -> torch.Tensor:
        images = self.images if indices is None else self.images[np.asarray(indices)]
        return torch.tensor(images)

    def indices_with_factor(self, factor: int, value: int) -> np.ndarray:
        return np.flatnonzero(self.factor_values[:, factor] == value)


def _grid(spec: FactorSpec) -> np.ndarray:
    # C order, so the last factor varies fastest
    index = np.arange(spec.size)
    return np.stack(np.unravel_index(index, spec.cardinalities), axis=1).astype(np.int32)


def generate(spec: FactorSpec, mode: str = 'exhaustive', n: Optional[int] = None, seed: int = 0) -> FactorDataset:
    """
    Generate a dataset.

    :param spec: the dataset spec
    :param mode: ``exhaustive`` enumerates the factor grid in lexicographic
        order; ``sampled`` draws ``n`` factor tuples uniformly with ``seed``
    :param n: number of samples in sampled mode
    :param seed: seed of sampled mode
    :return: the generated dataset
    """
    if mode == 'exhaustive':
        factor_values = _grid(spec)
    elif mode == 'sampled':
        if n is None or n < 1:
            raise PreconditionError(f"Sampled generation needs n >= 1, got {n}")
        rng = np.random.default_rng(seed)
        factor_values = np.stack(
            [rng.integers(0, cardinality, size=n) for cardinality in spec.cardinalities], axis=1
        ).astype(np.int32)
    else:
        raise PreconditionError(f"Unknown generation mode {mode!r}")

    images = np.stack([render_scene(spec, row) for row in factor_values]).astype(np.float32)
    logger.info("Generated %d %s images for factors %s", len(images), mode, spec.describe())
    return FactorDataset(spec, images, factor_values)


def batches(dataset: FactorDataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """
    One epoch over ``dataset``; the last partial batch is kept.

    :return: a stream of ``(images, factor_values)`` batches
    """
    if not 1 <= batch_size <= len(dataset):
        raise PreconditionError(f"batch_size must be in [1, {len(dataset)}], got {batch_size}")
    generator = torch.Generator()
    generator.manual_seed(seed)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, drop_last=False, generator=generator)
    return iter(loader)


def endless_batches(dataset: FactorDataset, batch_size: int, seed: int, start_epoch: int = 0) -> Iterator[torch.Tensor]:
    """Image batches over consecutive shuffled epochs; epoch ``e`` is seeded with ``seed + e``."""
    epoch = start_epoch
    while True:
        for images, _ in batches(dataset, batch_size, seed=seed + epoch, shuffle=True):
            yield images
        epoch += 1


class DatasetManifest(BaseModel):
    format: str
    factors: str
    image_size: str
    num_samples: int
    images_dtype: str
    factors_dtype: str
    images_shape: str
    factors_shape: str


def save_dataset(dataset: FactorDataset, directory: str) -> str:
    """
    Export ``dataset`` as a manifest plus raw ``images.f32`` and
    ``factors.i32`` arrays.
    """
    os.makedirs(directory, exist_ok=True)
    write_raw_array(os.path.join(directory, 'images.f32'), dataset.images, FLOAT_DTYPE)
    write_raw_array(os.path.join(directory, 'factors.i32'), dataset.factor_values, INT_DTYPE)
    return write_manifest(directory, {
        'format': DATASET_FORMAT,
        'factors': dataset.spec.describe(),
        'image_size': list(dataset.spec.image_size),
        'num_samples': len(dataset),
        'images_dtype': FLOAT_DTYPE,
        'factors_dtype': INT_DTYPE,
        'images_shape': list(dataset.images.shape),
        'factors_shape': list(dataset.factor_values.shape),
    })


def load_dataset(directory: str) -> FactorDataset:
    """
    Import a dataset written by :func:`save_dataset`.

    :raises ManifestError: naming the offending key if the manifest is invalid
    """
    path = os.path.join(directory, 'manifest')
    manifest = validate_manifest(DatasetManifest, read_manifest(directory), path)
    if manifest.format != DATASET_FORMAT:
        raise ManifestError(f"Unsupported format {manifest.format!r}", key='format', path=path)
    if manifest.images_dtype != FLOAT_DTYPE:
        raise ManifestError(f"Unsupported dtype {manifest.images_dtype!r}", key='images_dtype', path=path)
    if manifest.factors_dtype != INT_DTYPE:
        raise ManifestError(f"Unsupported dtype {manifest.factors_dtype!r}", key='factors_dtype', path=path)
    try:
        spec = FactorSpec.parse(manifest.factors, manifest.image_size)
    except (ValueError, PreconditionError) as e:
        raise ManifestError(str(e), key='factors', path=path) from e

    shapes: Dict[str, Tuple[int, ...]] = {}
    for key in ('images_shape', 'factors_shape'):
        try:
            shapes[key] = parse_shape(getattr(manifest, key))
        except ValueError as e:
            raise ManifestError(str(e), key=key, path=path) from e
    if shapes['images_shape'] != (manifest.num_samples,) + spec.image_size:
        raise ManifestError("images_shape disagrees with num_samples and image_size", key='images_shape', path=path)
    if shapes['factors_shape'] != (manifest.num_samples, spec.num_factors):
        raise ManifestError("factors_shape disagrees with num_samples and factors", key='factors_shape', path=path)

    images = read_raw_array(os.path.join(directory, 'images.f32'), FLOAT_DTYPE, shapes['images_shape'])
    factor_values = read_raw_array(os.path.join(directory, 'factors.i32'), INT_DTYPE, shapes['factors_shape'])
    return FactorDataset(spec, images.astype(np.float32), factor_values.astype(np.int32))

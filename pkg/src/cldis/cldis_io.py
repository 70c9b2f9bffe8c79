"""
Module containing the on-disk conventions shared by datasets, checkpoints,
direction matrices and reports: plain-text ``key=value`` manifests, raw
little-endian arrays in row-major order, lossless PNG images and CSV tables.
"""
import logging
import os
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import pandas as pd
import torch
from PIL import Image
from pydantic import BaseModel, ValidationError

from .cldis_errors import ManifestError, PreconditionError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest'
FLOAT_DTYPE = '<f4'
INT_DTYPE = '<i4'
TENSOR_PREFIX = 'tensor.'

ManifestModel = TypeVar('ManifestModel', bound=BaseModel)


def format_value(value: Any) -> str:
    """
    Render a python value the way it is stored in a manifest: sequences are
    comma-separated, floats use ``repr`` so they round-trip exactly.

    :meta private:
    """
    if isinstance(value, (list, tuple)):
        return ','.join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_shape(text: str) -> Tuple[int, ...]:
    """
    Parse a comma-separated shape such as ``3072,3,32,32``. The empty string
    is the shape of a scalar.
    """
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(','))


def write_manifest(directory: str, entries: Mapping[str, Any], name: str = MANIFEST_NAME) -> str:
    """
    Write ``entries`` as a ``key=value`` manifest into ``directory``.

    :param directory: the directory to write into (created if missing)
    :param entries: ordered mapping of keys to values
    :param name: the manifest file name
    :return: the path of the written manifest
    """
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    with open(path, 'w') as writer:
        for key, value in entries.items():
            if '=' in key or '\n' in key:
                raise PreconditionError(f"Manifest key {key!r} cannot contain '=' or newlines")
            writer.write("%s=%s\n" % (key, format_value(value)))
    return path


def read_manifest(directory: str, name: str = MANIFEST_NAME) -> Dict[str, str]:
    """
    Read a ``key=value`` manifest. Blank lines and ``#`` comments are skipped.

    :param directory: the directory holding the manifest
    :param name: the manifest file name
    :return: the raw string entries in file order
    :raises ManifestError: if the file is missing or a line cannot be parsed
    """
    path = os.path.join(directory, name)
    if not os.path.isfile(path):
        raise ManifestError("Manifest file not found", path=path)
    entries: Dict[str, str] = {}
    with open(path) as reader:
        for line_no, line in enumerate(reader, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ManifestError(f"Line {line_no} is not of the form key=value", key=line, path=path)
            key, value = line.split('=', 1)
            key = key.strip()
            if not key:
                raise ManifestError(f"Line {line_no} has an empty key", path=path)
            if key in entries:
                raise ManifestError(f"Duplicate entry on line {line_no}", key=key, path=path)
            entries[key] = value.strip()
    return entries


def validate_manifest(model_cls: Type[ManifestModel], entries: Mapping[str, str], path: Optional[str] = None) -> ManifestModel:
    """
    Validate raw manifest entries against a pydantic model.

    :raises ManifestError: naming the first offending key
    """
    try:
        return model_cls(**entries)
    except ValidationError as e:
        error = e.errors()[0]
        key = '.'.join(str(part) for part in error.get('loc', ()))
        raise ManifestError(error.get('msg', 'invalid value'), key=key or None, path=path) from e


def write_raw_array(path: str, array: np.ndarray, dtype: str = FLOAT_DTYPE) -> None:
    """Write ``array`` as raw little-endian values in row-major order."""
    np.ascontiguousarray(array, dtype=dtype).tofile(path)


def read_raw_array(path: str, dtype: str, shape: Sequence[int]) -> np.ndarray:
    """
    Read a raw little-endian array written by :func:`write_raw_array`.

    :raises ManifestError: if the file size does not match ``shape``
    """
    if not os.path.isfile(path):
        raise ManifestError("Array file not found", path=path)
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape)) if len(shape) else 1
    if data.size != expected:
        raise ManifestError(f"Array has {data.size} values but the manifest declares shape {tuple(shape)}", path=path)
    return data.reshape(tuple(shape))


def save_tensors(directory: str, tensors: Mapping[str, torch.Tensor]) -> Dict[str, str]:
    """
    Write one ``<name>.f32`` raw array per tensor.

    :param directory: the checkpoint directory
    :param tensors: named 32-bit float tensors (e.g. a ``state_dict``)
    :return: manifest entries ``tensor.<name>=<shape>`` describing the files
    """
    os.makedirs(directory, exist_ok=True)
    entries = {}
    for name, tensor in tensors.items():
        if tensor.dtype != torch.float32:
            raise PreconditionError(f"Tensor {name} has dtype {tensor.dtype}; checkpoints store float32 only")
        write_raw_array(os.path.join(directory, name + '.f32'), tensor.detach().cpu().numpy())
        entries[TENSOR_PREFIX + name] = format_value(list(tensor.shape))
    return entries


def load_tensors(directory: str, entries: Mapping[str, str], prefix: str = '') -> Dict[str, torch.Tensor]:
    """
    Load the tensors declared by ``tensor.<name>`` manifest entries.

    :param prefix: only load tensors whose name starts with this prefix; the
        prefix is stripped from the returned names
    """
    tensors = {}
    for key, value in entries.items():
        if not key.startswith(TENSOR_PREFIX):
            continue
        name = key[len(TENSOR_PREFIX):]
        if not name.startswith(prefix):
            continue
        array = read_raw_array(os.path.join(directory, name + '.f32'), FLOAT_DTYPE, parse_shape(value))
        tensors[name[len(prefix):]] = torch.from_numpy(array.copy())
    return tensors


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map intensities in [0,1] to 8-bit values (values outside are clipped)."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _to_pil(image: np.ndarray) -> Image.Image:
    # [C,H,W] float -> PIL
    pixels = to_uint8(np.asarray(image))
    if pixels.shape[0] == 1:
        return Image.fromarray(pixels[0], mode='L')
    return Image.fromarray(np.transpose(pixels, (1, 2, 0)), mode='RGB')


def save_image_grid(path: str, rows: Sequence[Sequence[np.ndarray]]) -> str:
    """
    Tile ``rows`` of ``[C,H,W]`` images in [0,1] into one lossless PNG.

    :param path: the output file
    :param rows: the grid, one inner sequence per row, all images the same shape
    :return: the output path
    """
    if len(rows) == 0 or len(rows[0]) == 0:
        raise PreconditionError("Cannot write an empty image grid")
    grid = np.concatenate([np.concatenate([np.asarray(img) for img in row], axis=2) for row in rows], axis=1)
    _to_pil(grid).save(path, format='PNG')
    return path


def save_heatmap(path: str, heatmap: np.ndarray) -> Tuple[float, float]:
    """
    Write a ``[H,W]`` array as a grayscale PNG with a linear min/max mapping.

    :return: the ``(min, max)`` used for the mapping
    """
    low, high = float(np.min(heatmap)), float(np.max(heatmap))
    scale = high - low
    scaled = (heatmap - low) / scale if scale > 0 else np.zeros_like(heatmap)
    _to_pil(scaled[None]).save(path, format='PNG')
    return low, high


def load_image(path: str, channels: int) -> np.ndarray:
    """Read a PNG into a ``[C,H,W]`` float32 array in [0,1]."""
    with Image.open(path) as img:
        img = img.convert('L' if channels == 1 else 'RGB')
        pixels = np.asarray(img, dtype=np.float32) / 255.0
    if channels == 1:
        return pixels[None]
    return np.transpose(pixels, (2, 0, 1)).copy()


def append_rows(path: str, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> None:
    """Append rows to an append-only CSV table, writing the header on creation."""
    if not rows:
        return
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(path, mode='a', header=not os.path.exists(path), index=False)


def read_table(path: str) -> pd.DataFrame:
    """Read a CSV table written by this package with exact float round-tripping."""
    return pd.read_csv(path, float_precision='round_trip')

"""
Test suite for the procedural factor datasets
"""
import os

import numpy as np
import pytest

from cldis.cldis_data import (
    FACTOR_NAMES,
    MAX_SCALE,
    MIN_SCALE,
    FactorSpec,
    batches,
    default_spec,
    endless_batches,
    generate,
    load_dataset,
    render_scene,
    save_dataset,
)
from cldis.cldis_errors import ManifestError, PreconditionError


class TestFactorSpec:
    """
    Test the canonical spec and spec validation
    """
    def test_default_spec(self):
        spec = default_spec()
        assert spec.size == 3 * 4 * 8 * 8 * 4 == 3072
        assert spec.num_factors == 5
        assert spec.image_size == (3, 32, 32)
        assert spec.names == FACTOR_NAMES

    def test_cardinality_below_two(self):
        with pytest.raises(PreconditionError):
            FactorSpec.from_cardinalities((3, 1, 8, 8, 4), (3, 32, 32))

    def test_bad_channels(self):
        with pytest.raises(PreconditionError):
            FactorSpec.from_cardinalities((3, 4, 8, 8, 4), (2, 32, 32))

    def test_parse_describe(self):
        spec = default_spec()
        assert FactorSpec.parse(spec.describe(), '3,32,32') == spec


def _centroid_x(image):
    mask = image.sum(axis=0) > 0
    return np.nonzero(mask)[1].mean()


class TestRenderScene:
    """
    Test rasterization of single scenes
    """
    def test_deterministic(self):
        spec = default_spec()
        a = render_scene(spec, [1, 2, 3, 4, 1])
        b = render_scene(spec, [1, 2, 3, 4, 1])
        assert a.dtype == np.float32
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_pos_x_moves_centroid(self):
        spec = default_spec()
        left = render_scene(spec, [0, 1, 0, 3, 0])
        right = render_scene(spec, [0, 1, 7, 3, 0])
        assert _centroid_x(right) > _centroid_x(left)

    @pytest.mark.parametrize('scale', [0, 3])
    def test_square_side_is_scale_times_half_width(self, scale):
        spec = default_spec()
        image = render_scene(spec, [0, scale, 3, 3, 0])
        columns = np.flatnonzero((image.sum(axis=0) > 0).any(axis=0))
        side = np.linspace(MIN_SCALE, MAX_SCALE, spec.cardinality('scale'))[scale] * 32 / 2
        assert side - 1 < columns.size <= side + 1

    def test_color_changes_values_not_mask(self):
        spec = default_spec()
        a = render_scene(spec, [2, 3, 4, 4, 0])
        b = render_scene(spec, [2, 3, 4, 4, 2])
        assert np.array_equal(a.sum(axis=0) > 0, b.sum(axis=0) > 0)
        assert not np.array_equal(a, b)

    def test_out_of_range_value(self):
        with pytest.raises(PreconditionError):
            render_scene(default_spec(), [3, 0, 0, 0, 0])

    def test_every_factor_identifiable(self, tiny_spec):
        base = [0] * tiny_spec.num_factors
        reference = render_scene(tiny_spec, base)
        for n in range(tiny_spec.num_factors):
            toggled = list(base)
            toggled[n] = 1
            assert np.abs(render_scene(tiny_spec, toggled) - reference).sum() > 0, FACTOR_NAMES[n]


class TestGenerate:
    """
    Test exhaustive and sampled generation
    """
    def test_exhaustive_default(self):
        dataset = generate(default_spec())
        assert len(dataset) == 3072
        assert dataset.images.shape == (3072, 3, 32, 32)
        assert np.all(dataset.factor_values[0] == 0)
        assert dataset.is_exhaustive

    def test_lexicographic_order(self, tiny_dataset):
        assert list(tiny_dataset.factor_values[1]) == [0, 0, 0, 0, 1]
        assert list(tiny_dataset.factor_values[-1]) == [1, 1, 1, 1, 1]

    def test_grid_balance(self, metric_dataset):
        for n, cardinality in enumerate(metric_dataset.spec.cardinalities):
            counts = np.bincount(metric_dataset.factor_values[:, n], minlength=cardinality)
            assert np.all(counts == len(metric_dataset) // cardinality)

    def test_sampled_reproducible(self):
        a = generate(default_spec(), 'sampled', n=100, seed=7)
        b = generate(default_spec(), 'sampled', n=100, seed=7)
        assert np.array_equal(a.factor_values, b.factor_values)
        assert np.array_equal(a.images, b.images)
        assert not a.is_exhaustive

    def test_sampled_needs_n(self, tiny_spec):
        with pytest.raises(PreconditionError):
            generate(tiny_spec, 'sampled', n=0)

    def test_immutable(self, tiny_dataset):
        with pytest.raises(ValueError):
            tiny_dataset.images[0, 0, 0, 0] = 1.0

    def test_identical_rows_identical_images(self, tiny_spec):
        dataset = generate(tiny_spec, 'sampled', n=200, seed=3)
        rows = {}
        for values, image in zip(dataset.factor_values, dataset.images):
            key = tuple(values)
            if key in rows:
                assert np.array_equal(rows[key], image)
            rows[key] = image


class TestBatches:
    """
    Test epoch batching
    """
    @pytest.fixture
    def ten(self, tiny_spec):
        return generate(tiny_spec, 'sampled', n=10, seed=1)

    def test_partial_batch(self, ten):
        sizes = [images.shape[0] for images, _ in batches(ten, 4, seed=0)]
        assert sizes == [4, 4, 2]

    def test_no_shuffle_keeps_order(self, ten):
        factors = np.concatenate([f.numpy() for _, f in batches(ten, 4, shuffle=False)])
        assert np.array_equal(factors, ten.factor_values)

    def test_same_seed_same_permutation(self, ten):
        a = np.concatenate([f.numpy() for _, f in batches(ten, 3, seed=5)])
        b = np.concatenate([f.numpy() for _, f in batches(ten, 3, seed=5)])
        assert np.array_equal(a, b)
        assert sorted(map(tuple, a)) == sorted(map(tuple, ten.factor_values))

    def test_batch_size_too_large(self, ten):
        with pytest.raises(PreconditionError):
            batches(ten, 11)

    def test_endless_resumes_by_epoch(self, ten):
        stream = endless_batches(ten, 4, seed=2)
        seen = [next(stream) for _ in range(6)]
        resumed = endless_batches(ten, 4, seed=2, start_epoch=1)
        for expected in seen[3:]:
            assert np.array_equal(next(resumed).numpy(), expected.numpy())


class TestExport:
    """
    Test dataset export and import
    """
    def test_round_trip(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, str(tmp_path))
        loaded = load_dataset(str(tmp_path))
        assert loaded.spec == tiny_dataset.spec
        assert np.array_equal(loaded.images, tiny_dataset.images)
        assert np.array_equal(loaded.factor_values, tiny_dataset.factor_values)

    def test_factor_file_layout(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, str(tmp_path))
        raw = np.fromfile(os.path.join(str(tmp_path), 'factors.i32'), dtype='<i4')
        assert np.array_equal(raw, tiny_dataset.factor_values.ravel())

    def test_corrupt_manifest_names_key(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, str(tmp_path))
        path = os.path.join(str(tmp_path), 'manifest')
        with open(path) as f:
            lines = [line if not line.startswith('num_samples=') else 'num_samples=many\n' for line in f]
        with open(path, 'w') as f:
            f.writelines(lines)
        with pytest.raises(ManifestError) as info:
            load_dataset(str(tmp_path))
        assert info.value.key == 'num_samples'

    def test_shape_mismatch_names_key(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, str(tmp_path))
        path = os.path.join(str(tmp_path), 'manifest')
        with open(path) as f:
            text = f.read().replace('factors_shape=32,5', 'factors_shape=32,4')
        with open(path, 'w') as f:
            f.write(text)
        with pytest.raises(ManifestError) as info:
            load_dataset(str(tmp_path))
        assert info.value.key == 'factors_shape'

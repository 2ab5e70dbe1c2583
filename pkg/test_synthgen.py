"""
測試形狀資料集與抽樣工具
"""

import sys
import os
sys.path.append(os.path.dirname(__file__))

import numpy as np
import pandas as pd
import pytest

from synthgen import (
    ATTRIBUTES, DatasetSpec, ShapeFactors, export_dataset_csv, make_dataset, make_episode,
    render_shape, sample_gaussian_pair,
)


@pytest.fixture(scope='module')
def dataset():
    return make_dataset(seed=0)


# ========== render_shape ==========

def test_square_fills_box():
    image = render_shape(ShapeFactors('square', 3, 0, 0))
    assert image.shape == (16, 16)
    assert image.sum() == 9
    assert image[0:3, 0:3].all()


@pytest.mark.parametrize('shape', ['diamond', 'cross'])
@pytest.mark.parametrize('position', [(0, 0), (4, 7), (9, 9)])
def test_small_diamond_and_cross_have_five_pixels(shape, position):
    image = render_shape(ShapeFactors(shape, 3, *position))
    assert image.sum() == 5


def test_pixel_counts_per_shape_and_scale():
    expected = {('square', 5): 25, ('square', 7): 49, ('cross', 5): 9, ('cross', 7): 13,
                ('diamond', 5): 13, ('diamond', 7): 25}
    for (shape, scale), count in expected.items():
        assert render_shape(ShapeFactors(shape, scale, 2, 3)).sum() == count


def test_box_origin_is_row_pos_y_col_pos_x():
    image = render_shape(ShapeFactors('square', 3, 5, 1))
    rows, cols = np.nonzero(image)
    assert rows.min() == 1 and cols.min() == 5


def test_invalid_factors_rejected():
    with pytest.raises(ValueError):
        ShapeFactors('circle', 3, 0, 0)
    with pytest.raises(ValueError):
        ShapeFactors('square', 4, 0, 0)
    with pytest.raises(ValueError):
        ShapeFactors('square', 3, 10, 0)


# ========== make_dataset ==========

def test_default_grid_has_900_images(dataset):
    assert len(dataset) == 900
    assert dataset.images.shape == (900, 256)
    assert set(np.unique(dataset.images)) <= {0.0, 1.0}


def test_lit_pixels_follow_shape_rule(dataset):
    for factors, image in zip(dataset.factors, dataset.images):
        assert image.sum() == render_shape(factors).sum()


def test_dataset_is_deterministic(dataset):
    again = make_dataset(seed=0)
    assert np.array_equal(dataset.images, again.images)
    assert np.array_equal(dataset.grid, again.grid)


def test_position_bin_labels(dataset):
    idx = next(k for k, f in enumerate(dataset.factors) if f.pos_x == 7 and f.pos_y == 2)
    assert dataset.labels['pos_x_bin'][idx] == 1
    assert dataset.labels['pos_y_bin'][idx] == 0
    assert list(dataset.labels) == list(ATTRIBUTES)


def test_class_ids_cover_nine_classes(dataset):
    counts = np.bincount(dataset.class_ids)
    assert len(counts) == 9 and np.all(counts == 100)


def test_split_indices_partition(dataset):
    train_idx, test_idx = dataset.split_indices(0.2)
    assert len(train_idx) == 720 and len(test_idx) == 180
    assert len(np.intersect1d(train_idx, test_idx)) == 0


def test_reduced_grid():
    small = make_dataset(DatasetSpec(shapes=('square',), scales=(3,), positions=(0, 1)))
    assert len(small) == 4


def test_export_dataset_csv(tmp_path, dataset):
    path = tmp_path / 'dataset.csv'
    export_dataset_csv(dataset, str(path))
    df = pd.read_csv(path)
    assert list(df.columns[:5]) == ['idx', 'shape', 'scale', 'pos_x', 'pos_y']
    assert df.shape == (900, 5 + 256)
    assert df.iloc[:, 5:].to_numpy().sum() == dataset.images.sum()


# ========== sample_gaussian_pair ==========

@pytest.mark.parametrize('rho', [0.0, 0.9])
def test_gaussian_pair_correlation(rho):
    pair = sample_gaussian_pair(rho, 100_000, seed=1)
    assert np.corrcoef(pair, rowvar=False)[0, 1] == pytest.approx(rho, abs=0.01)


def test_gaussian_pair_determinism_and_range():
    assert np.array_equal(sample_gaussian_pair(0.5, 100, seed=3), sample_gaussian_pair(0.5, 100, seed=3))
    with pytest.raises(ValueError):
        sample_gaussian_pair(1.0, 10)


# ========== make_episode ==========

def test_episode_structure(dataset):
    ep = make_episode(dataset, 3, 1, seed=4)
    assert len(ep.support_indices) == 3
    assert len(ep.classes) == 3
    assert ep.query_class in ep.classes
    assert ep.query_index not in ep.support_indices
    assert dataset.class_ids[ep.query_index] == ep.query_class


def test_episode_determinism(dataset):
    a = make_episode(dataset, 3, 2, seed=9)
    b = make_episode(dataset, 3, 2, seed=9)
    assert np.array_equal(a.support_indices, b.support_indices)
    assert a.query_index == b.query_index


def test_episode_class_pool(dataset):
    ep = make_episode(dataset, 3, 1, class_pool=[2, 4, 6], seed=0)
    assert set(ep.classes) == {2, 4, 6}


def test_episode_too_few_samples():
    labels = np.array([0, 0, 1, 1, 2, 2])
    with pytest.raises(ValueError):
        make_episode(labels, 3, 2, seed=0)
    with pytest.raises(ValueError):
        make_episode(labels, 4, 1, seed=0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v', '-rA']))

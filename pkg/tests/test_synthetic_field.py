import json
import os

import numpy as np
import pandas as pd
import pytest

from core.exceptions import InputError
from core.leaf_segmentation import SegmentationThresholds, segment_leaves
from core.plant_localization import PlantConfiguration, read_plants
from core.raster import load_image, rgb_to_hsv
from core.synthetic_field import (FieldSpec, generate_field, generate_leaf_tiles, leaf_polygon, load_field_spec,
                                  score_localization, write_truth)


def test_single_plant_sits_at_image_centre():
    spec = FieldSpec(rows=1, cols=1, jitter_i=0.0, jitter_j=0.0, height=101, width=121)
    _, truth = generate_field(spec)
    np.testing.assert_array_equal(truth.plants, [[50.0, 60.0]])
    assert truth.leaf_count == spec.leaves_per_plant


def test_same_seed_same_field(small_field_spec):
    img_a, truth_a = generate_field(small_field_spec)
    img_b, truth_b = generate_field(small_field_spec)
    np.testing.assert_array_equal(img_a.samples, img_b.samples)
    np.testing.assert_array_equal(truth_a.plants, truth_b.plants)
    img_c, _ = generate_field(FieldSpec(**{**small_field_spec.to_dict(), 'seed': small_field_spec.seed + 1}))
    assert not np.array_equal(img_a.samples, img_c.samples)


def test_default_field_layout():
    _, truth = generate_field(FieldSpec())
    assert truth.plants.shape == (24, 2)
    np.testing.assert_array_equal(truth.row_ids, np.repeat(np.arange(4), 6))
    np.testing.assert_array_equal(truth.col_ids, np.tile(np.arange(6), 4))
    np.testing.assert_allclose(np.diff(np.unique(truth.grid[:, 0])), 60.0)
    np.testing.assert_allclose(np.diff(np.unique(truth.grid[:, 1])), 50.0)
    assert np.max(np.abs(truth.plants - truth.grid)) < 10.0
    assert truth.leaf_count == 480
    assert set(truth.leaves['plant_id']) == set(range(24))


def test_segmentation_recovers_rendered_mask(small_field_spec):
    img, truth = generate_field(small_field_spec)
    np.testing.assert_array_equal(segment_leaves(img, SegmentationThresholds()).bits, truth.mask)


def test_leaf_colours_stay_inside_hue_band():
    img, truth = generate_leaf_tiles(n_leaves=20, vary_area=False, seed=11)
    th = SegmentationThresholds()
    for _, leaf in truth.leaves.iterrows():
        hsv = rgb_to_hsv(*img.samples[int(leaf['center_i']), int(leaf['center_j'])])
        assert th.tau1 < hsv.h < th.tau2


def test_leaf_tiles_have_balanced_areas():
    _, truth = generate_leaf_tiles(n_leaves=50, vary_area=True)
    pixels = truth.leaves['pixels']
    assert pixels.sum() == 50 * 6 * 20
    assert (pixels.max() - pixels.mean()) / pixels.mean() <= 0.2
    assert truth.mask.sum() == pixels.sum()
    with pytest.raises(InputError):
        generate_leaf_tiles(n_leaves=0)


def test_leaf_polygon_orientation():
    flat = leaf_polygon((10.0, 20.0), 0.0, 16.0, 4.0)
    assert np.ptp(flat[:, 1]) == pytest.approx(16.0)
    assert np.ptp(flat[:, 0]) == pytest.approx(4.0)
    upright = leaf_polygon((10.0, 20.0), np.pi / 2, 16.0, 4.0)
    assert np.ptp(upright[:, 0]) == pytest.approx(16.0)


def test_field_spec_validation(tmp_path):
    with pytest.raises(InputError):
        FieldSpec(rows=0)
    with pytest.raises(InputError):
        FieldSpec(jitter_i=-1.0)
    with pytest.raises(InputError):
        FieldSpec(tau1=50, tau2=52)
    with pytest.raises(InputError):
        FieldSpec.from_dict({'colour': 'red'})
    with pytest.raises(InputError):
        generate_field(FieldSpec(rows=2, cols=2, inter_row=200.0, height=50, width=50))
    path = tmp_path / 'field.json'
    path.write_text(json.dumps({'rows': 2, 'cols': 3, 'seed': 4}))
    assert load_field_spec(str(path)) == FieldSpec(rows=2, cols=3, seed=4)
    with pytest.raises(InputError):
        load_field_spec(str(tmp_path / 'missing.json'))


def test_score_shift_and_permutation():
    truth = np.array([[10.0, 10.0], [50.0, 80.0]])
    shifted = PlantConfiguration(truth + (3.0, 4.0))
    mean_error, max_error, pairs = score_localization(shifted, truth)
    assert (mean_error, max_error) == (5.0, 5.0)
    assert pairs == [(0, 0), (1, 1)]
    swapped = PlantConfiguration(truth[::-1])
    mean_error, _, pairs = score_localization(swapped, truth)
    assert mean_error == 0.0
    assert pairs == [(0, 1), (1, 0)]


def test_greedy_matching_beyond_hungarian_limit():
    truth = np.column_stack([np.repeat(np.arange(10) * 30.0, 8), np.tile(np.arange(8) * 30.0, 10)])
    est = PlantConfiguration(np.random.default_rng(0).permutation(truth) + 1.0)
    mean_error, max_error, pairs = score_localization(est, truth)
    assert mean_error == pytest.approx(np.sqrt(2.0))
    assert max_error == pytest.approx(np.sqrt(2.0))
    assert len({t for _, t in pairs}) == 80


def test_score_count_mismatch():
    with pytest.raises(InputError):
        score_localization(PlantConfiguration(np.zeros((2, 2))), np.zeros((3, 2)))


def test_write_truth(tmp_path, small_field_spec):
    _, truth = generate_field(small_field_spec)
    write_truth(truth, str(tmp_path))
    plants, assign = read_plants(str(tmp_path / 'plants.csv'))
    np.testing.assert_allclose(plants.plants, truth.plants, atol=1e-6)
    np.testing.assert_array_equal(assign.row_of, truth.row_ids)
    init, _ = read_plants(str(tmp_path / 'plants_init.csv'))
    np.testing.assert_allclose(init.plants, truth.grid, atol=1e-6)
    assert len(pd.read_csv(tmp_path / 'leaves.csv')) == truth.leaf_count
    np.testing.assert_array_equal(load_image(str(tmp_path / 'mask.png')).plane() > 0, truth.mask)


def test_bundled_field_spec_is_the_default():
    path = os.path.join(os.path.dirname(__file__), '..', 'raw_data', 'field_spec.json')
    assert load_field_spec(path) == FieldSpec()

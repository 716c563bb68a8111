import os

import numpy as np
import pandas as pd
import pytest

from core.exceptions import InputError
from core.leaf_segmentation import (LeafCountCalibration, LeafMask, SegmentationThresholds, calibrate_rho,
                                    calibrate_rho_from_region, count_leaves_in_image, count_leaves_in_tiles,
                                    count_pixels, density_heatmap, estimate_leaf_count, save_density_map,
                                    segment_leaves)
from core.raster import RasterImage, load_image, rgb_to_hsv
from core.synthetic_field import generate_leaf_tiles, tile_region


def rgb_card(*pixels):
    return RasterImage.from_array(np.array([pixels], dtype=np.uint8))


@pytest.mark.parametrize("rgb, hsv, expected", [
    ((40, 100, 20), (53, 204, 100), True),      # saturated green
    ((96, 100, 96), (60, 10, 100), False),      # washed out and dark
    ((255, 0, 0), (0, 255, 255), False),        # red
    ((200, 210, 200), (60, 12, 210), True),     # bright enough to pass on value alone
    ((139, 90, 43), (15, 176, 139), False),     # soil
])
def test_segment_colour_card(rgb, hsv, expected):
    assert tuple(vars(rgb_to_hsv(*rgb)).values()) == hsv
    mask = segment_leaves(rgb_card(rgb), SegmentationThresholds())
    assert bool(mask.bits[0, 0]) is expected


DATA = os.path.join(os.path.dirname(__file__), 'data')


def test_hsv_card_reproduces_golden_mask():
    # hue sweeps the columns; four value bands of 16 rows each sweep saturation 0..1
    card = load_image(os.path.join(DATA, 'hsv_card.png'))
    golden = load_image(os.path.join(DATA, 'hsv_card_mask.png')).plane() > 0
    assert (card.width, card.height, card.channels) == (64, 64, 3)
    mask = segment_leaves(card, SegmentationThresholds(tau1=30, tau2=79, tau3=30, tau4=163))
    np.testing.assert_array_equal(mask.bits, golden)
    assert count_pixels(mask) == 1042


def test_segment_matches_rule_on_random_pixels():
    rng = np.random.default_rng(12)
    img = RasterImage.from_array(rng.integers(0, 256, size=(40, 30, 3), dtype=np.uint8))
    th = SegmentationThresholds()
    mask = segment_leaves(img, th, threads=3)
    for (i, j), bit in np.ndenumerate(mask.bits):
        t = rgb_to_hsv(*img.samples[i, j])
        assert bit == (th.tau1 <= t.h <= th.tau2 and (th.tau3 <= t.s or th.tau4 <= t.v))


def test_segmentation_is_monotone_in_thresholds():
    img = RasterImage.from_array(np.random.default_rng(1).integers(0, 256, size=(50, 50, 3), dtype=np.uint8))
    base = segment_leaves(img, SegmentationThresholds()).bits
    for tighter in (SegmentationThresholds(tau3=80), SegmentationThresholds(tau4=220),
                    SegmentationThresholds(tau1=40, tau2=70)):
        assert not np.any(segment_leaves(img, tighter).bits & ~base)


def test_pixel_count_ignores_pixel_order():
    rng = np.random.default_rng(2)
    pixels = rng.integers(0, 256, size=(64 * 48, 3), dtype=np.uint8)
    img = RasterImage.from_array(pixels.reshape(64, 48, 3))
    shuffled = RasterImage.from_array(rng.permutation(pixels).reshape(64, 48, 3))
    th = SegmentationThresholds()
    assert count_pixels(segment_leaves(img, th)) == count_pixels(segment_leaves(shuffled, th))


def test_segment_rejects_grayscale_and_deep_images():
    with pytest.raises(InputError):
        segment_leaves(RasterImage.from_array(np.zeros((4, 4), dtype=np.uint8)), SegmentationThresholds())
    with pytest.raises(InputError):
        segment_leaves(RasterImage.from_array(np.zeros((4, 4, 3), dtype=np.uint16)), SegmentationThresholds())


def test_thresholds_validated():
    with pytest.raises(InputError):
        SegmentationThresholds(tau1=80, tau2=30)
    with pytest.raises(InputError):
        SegmentationThresholds(tau4=300)
    assert SegmentationThresholds.from_dict({'tau1': 25}) == SegmentationThresholds(tau1=25)


@pytest.mark.parametrize("bits, expected", [
    (np.zeros((5, 5)), 0),
    (np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]]), 5),
    (np.ones((10, 10)), 100),
])
def test_count_pixels(bits, expected):
    assert count_pixels(LeafMask.from_array(bits)) == expected


@pytest.mark.parametrize("alpha0, lambda0, rho", [(600, 30, 20.0), (7, 7, 1.0), (100, 8, 12.5)])
def test_calibrate_rho(alpha0, lambda0, rho):
    assert calibrate_rho(alpha0, lambda0).rho == rho


def test_calibrate_rho_rejects_zero():
    with pytest.raises(InputError):
        calibrate_rho(0, 5)
    with pytest.raises(InputError):
        calibrate_rho(10, 0)
    with pytest.raises(InputError):
        LeafCountCalibration(rho=0.0)


def test_estimate_leaf_count():
    assert estimate_leaf_count(2000, LeafCountCalibration(20.0)).value == 100.0
    assert estimate_leaf_count(0, LeafCountCalibration(20.0)).rounded == 0
    estimate = estimate_leaf_count(125, LeafCountCalibration(10.0))
    assert (estimate.value, estimate.rounded) == (12.5, 13)
    cal = calibrate_rho(1001, 7)
    assert estimate_leaf_count(1001, cal).value * cal.rho == pytest.approx(1001, abs=1e-9)


@pytest.mark.parametrize("vary_area", [False, True])
def test_leaf_count_on_tiles(vary_area):
    img, truth = generate_leaf_tiles(n_leaves=50, vary_area=vary_area, seed=3)
    mask = segment_leaves(img, SegmentationThresholds())
    np.testing.assert_array_equal(mask.bits, truth.mask)
    cal = calibrate_rho_from_region(mask, tile_region(0), lambda0=10)
    _, alpha, estimate = count_leaves_in_image(img, SegmentationThresholds(), cal)
    assert alpha == truth.leaves['pixels'].sum()
    assert estimate.value == pytest.approx(50.0)
    assert estimate.rounded == 50


def test_calibration_region_bounds(rect_mask):
    with pytest.raises(InputError):
        calibrate_rho_from_region(rect_mask, (0, 0, 100, 10), 3)


def test_count_leaves_in_tiles(rect_mask):
    table = count_leaves_in_tiles([rect_mask, LeafMask.from_array(np.zeros((3, 3)))], LeafCountCalibration(32.0))
    assert list(table['alpha']) == [320, 0]
    assert list(table['lambda_rounded']) == [10, 0]


def _brute_force_density(bits, window):
    half = window // 2
    h, w = bits.shape
    out = np.zeros((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            out[i, j] = bits[max(0, i - half):i + half + 1, max(0, j - half):j + half + 1].sum()
    return out


@pytest.mark.parametrize("window", [1, 3, 7, 41])
def test_heatmap_matches_brute_force(window):
    bits = np.random.default_rng(window).random((32, 32)) < 0.4
    density = density_heatmap(LeafMask.from_array(bits), window)
    np.testing.assert_array_equal(density.counts, _brute_force_density(bits, window))


def test_heatmap_full_window_and_borders():
    counts = density_heatmap(LeafMask.from_array(np.ones((60, 60))), 41).counts
    assert counts[30, 30] == 1681
    assert counts[0, 0] == 21 * 21
    assert counts.max() <= 1681


def test_heatmap_box_response():
    bits = np.zeros((5, 5))
    bits[2, 2] = 1
    counts = density_heatmap(LeafMask.from_array(bits), 3).counts
    expected = np.zeros((5, 5), dtype=int)
    expected[1:4, 1:4] = 1
    np.testing.assert_array_equal(counts, expected)
    assert not density_heatmap(LeafMask.from_array(np.zeros((4, 6))), 5).counts.any()


def test_heatmap_rejects_even_window(rect_mask):
    with pytest.raises(InputError):
        density_heatmap(rect_mask, 4)


def test_save_density_map(tmp_path, rect_mask):
    density = density_heatmap(rect_mask, 41)
    save_density_map(density, str(tmp_path / 'heat.png'), str(tmp_path / 'heat.csv'))
    png = load_image(str(tmp_path / 'heat.png'))
    assert png.bit_depth == 16
    np.testing.assert_array_equal(png.plane(), density.counts)
    np.testing.assert_array_equal(pd.read_csv(tmp_path / 'heat.csv', header=None).to_numpy(), density.counts)

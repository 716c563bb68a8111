import numpy as np
import pytest

from core.exceptions import InputError
from core.raster import (HsvTriplet, PixelCoord, RasterImage, bilinear_sample, load_image,
                         process_row_blocks, rgb_to_hsv, rgb_to_hsv_array, save_image)


@pytest.mark.parametrize("rgb, hsv", [
    ((0, 0, 0), (0, 0, 0)),
    ((255, 255, 255), (0, 0, 255)),
    ((0, 255, 0), (60, 255, 255)),
    ((255, 0, 0), (0, 255, 255)),
    ((255, 255, 0), (30, 255, 255)),
    ((0, 0, 255), (120, 255, 255)),
    ((139, 69, 19), (13, 220, 139)),
    ((128, 255, 0), (45, 255, 255)),
])
def test_rgb_to_hsv_hand_values(rgb, hsv):
    assert rgb_to_hsv(*rgb) == HsvTriplet(*hsv)


def test_hue_wraps_to_zero():
    # 359.76 deg halves to 179.88, which rounds to 180 and wraps
    assert rgb_to_hsv(255, 0, 1).h == 0


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(3)
    rgb = rng.integers(0, 256, size=(50, 3))
    table = rgb_to_hsv_array(rgb)
    for row, expected in zip(rgb, table):
        t = rgb_to_hsv(*row)
        assert (t.h, t.s, t.v) == tuple(expected)


def test_hsv_triplet_range_checked():
    with pytest.raises(InputError):
        HsvTriplet(180, 0, 0)


def test_raster_validation():
    with pytest.raises(InputError):
        RasterImage.from_array(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(InputError):
        RasterImage(width=3, height=4, channels=1, samples=np.zeros((4, 4, 1), dtype=np.uint8))


def test_samples_are_read_only():
    img = RasterImage.from_array(np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        img.samples[0, 0, 0] = 1


def test_save_and_load_preserve_samples(tmp_path):
    rng = np.random.default_rng(0)
    rgb = RasterImage.from_array(rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8))
    deep = RasterImage.from_array(rng.integers(0, 65536, size=(6, 4), dtype=np.uint16))
    save_image(rgb, str(tmp_path / 'rgb.png'))
    save_image(deep, str(tmp_path / 'deep.png'))
    np.testing.assert_array_equal(load_image(str(tmp_path / 'rgb.png')).samples, rgb.samples)
    loaded = load_image(str(tmp_path / 'deep.png'))
    assert loaded.bit_depth == 16
    np.testing.assert_array_equal(loaded.samples, deep.samples)


def test_load_single_black_pixel(tmp_path):
    save_image(RasterImage.from_array(np.zeros((1, 1), dtype=np.uint8)), str(tmp_path / 'one.png'))
    img = load_image(str(tmp_path / 'one.png'))
    assert (img.width, img.height, int(img.samples[0, 0, 0])) == (1, 1, 0)


def test_load_errors(tmp_path):
    with pytest.raises(InputError):
        load_image(str(tmp_path / 'missing.png'))
    noise = np.random.default_rng(1).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    save_image(RasterImage.from_array(noise), str(tmp_path / "ok.png"))
    data = (tmp_path / 'ok.png').read_bytes()
    (tmp_path / 'cut.png').write_bytes(data[:len(data) // 2])
    with pytest.raises(InputError):
        load_image(str(tmp_path / 'cut.png'))


def test_bilinear_sample_interpolates_and_fills_black():
    grid = np.array([[0, 10], [20, 30]], dtype=np.uint8)
    values = bilinear_sample(grid, np.array([0.5, 0.0, 1.0, -0.5, np.nan]), np.array([0.5, 1.0, 0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(values, [15, 10, 20, 0, 0])


def test_row_blocks_independent_of_threads():
    block = lambda a, b: np.arange(a, b)[:, np.newaxis] * np.ones((1, 3))
    np.testing.assert_array_equal(process_row_blocks(17, block, 1), process_row_blocks(17, block, 4))


def test_pixel_coord_within():
    assert PixelCoord(0, 0).within(1, 1)
    assert not PixelCoord(1, 0).within(1, 1)

import math

import numpy as np
import pytest
from skimage import draw

from core.leaf_segmentation import LeafMask
from core.lens_distortion import SmacCamera
from core.synthetic_field import FieldSpec, leaf_polygon


def rectangle_mask(height=40, width=80, top=16, left=20, rows=8, cols=40):
    bits = np.zeros((height, width), dtype=bool)
    bits[top:top + rows, left:left + cols] = True
    return LeafMask.from_array(bits)


def rotated_rectangle(bits, center, angle, length, width):
    corners = leaf_polygon(center, angle, length, width)
    rr, cc = draw.polygon(corners[:, 0], corners[:, 1], shape=bits.shape)
    bits[rr, cc] = True


@pytest.fixture
def rect_mask():
    """40 px long, 8 px wide leaf lying along x."""
    return rectangle_mask()


@pytest.fixture
def disk_mask():
    bits = np.zeros((60, 60), dtype=bool)
    rr, cc = draw.disk((30, 30), 10, shape=bits.shape)
    bits[rr, cc] = True
    return LeafMask.from_array(bits)


@pytest.fixture
def pinhole_camera():
    return SmacCamera(focal=4.0, pixel_pitch=0.01, sensor_width=64, sensor_height=48)


@pytest.fixture
def distorted_camera():
    return SmacCamera(focal=8.8, pixel_pitch=0.0024, sensor_width=5472, sensor_height=3648,
                      xp=0.012, yp=-0.008, k1=-2.1e-4, k2=1.3e-7, p1=1.5e-6, p2=-2.0e-6)


@pytest.fixture
def small_field_spec():
    return FieldSpec(leaves_per_plant=20)


def rectangle_grid_mask(k, cell=60, per_row=5, length=36, width=8):
    """k rotated rectangles at angles i*pi/k, one per cell of a per_row-wide grid."""
    n_rows = int(math.ceil(k / per_row))
    bits = np.zeros((n_rows * cell, per_row * cell), dtype=bool)
    for i in range(k):
        r, c = divmod(i, per_row)
        center = (r * cell + (cell - 1) / 2.0, c * cell + (cell - 1) / 2.0)
        rotated_rectangle(bits, center, i * math.pi / k, length, width)
    return LeafMask.from_array(bits)

"""Seeded synthetic sorghum plots with complete ground truth.

All randomness comes from one ``numpy.random.default_rng(seed)`` (PCG64)
stream consumed in a fixed order, so equal specs render identical bytes.
Leaves are hard-edged polygons coloured inside the green hue band on a brown
soil background whose hue stays below the band.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np
import pandas as pd
from matplotlib import colors
from scipy.optimize import linear_sum_assignment
from scipy.spatial import distance
from skimage import draw

from core.exceptions import InputError
from core.leaf_segmentation import LeafMask, save_mask
from core.plant_localization import PlantConfiguration, RowColumnAssignment, write_plants
from core.raster import RasterImage
from inputs.constants import SEGMENTATION_THRESHOLDS

logger = logging.getLogger(__name__)

SOIL_RGB = (139, 90, 43)
SOIL_NOISE = 8
LEAF_SATURATION = (180, 230)
LEAF_VALUE = (110, 200)
HUE_MARGIN = 2
TILE_LEAF_LENGTHS = (16, 18, 20, 22, 24)
HUNGARIAN_LIMIT = 64


@dataclass(frozen=True)
class FieldSpec:
    rows: int = 4
    cols: int = 6
    inter_row: float = 60.0
    intra_row: float = 50.0
    jitter_i: float = 2.0
    jitter_j: float = 2.0
    leaves_per_plant: int = 20
    leaf_length: float = 16.0
    leaf_width: float = 4.0
    radial_scale: float = 10.0
    height: int = 300
    width: int = 340
    seed: int = 7
    tau1: int = SEGMENTATION_THRESHOLDS['tau1']
    tau2: int = SEGMENTATION_THRESHOLDS['tau2']

    def __post_init__(self):
        for name in ('rows', 'cols', 'leaves_per_plant', 'height', 'width'):
            if getattr(self, name) < 1:
                raise InputError(f"FieldSpec.{name} must be positive")
        for name in ('inter_row', 'intra_row', 'leaf_length', 'leaf_width', 'radial_scale'):
            if not getattr(self, name) > 0:
                raise InputError(f"FieldSpec.{name} must be positive")
        if self.jitter_i < 0 or self.jitter_j < 0:
            raise InputError("Jitter cannot be negative")
        if self.tau2 - self.tau1 < 2 * HUE_MARGIN:
            raise InputError("Hue band is too narrow to render leaves inside it")

    @classmethod
    def from_dict(cls, data: dict) -> 'FieldSpec':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"Unknown field spec keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class FieldTruth:
    plants: np.ndarray              # (P, 2) i, j
    row_ids: np.ndarray
    col_ids: np.ndarray
    grid: np.ndarray                # un-jittered planting grid, (P, 2)
    leaves: pd.DataFrame
    polygons: List[np.ndarray] = field(repr=False)
    mask: np.ndarray = field(repr=False)

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    @property
    def configuration(self) -> PlantConfiguration:
        return PlantConfiguration(self.plants)

    @property
    def assignment(self) -> RowColumnAssignment:
        return RowColumnAssignment(self.row_ids, self.col_ids)


def load_field_spec(filename: str) -> FieldSpec:
    try:
        with open(filename, 'r', encoding='utf-8') as f:
            return FieldSpec.from_dict(json.load(f))
    except FileNotFoundError as e:
        raise InputError(f"Field spec not found: {filename}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"Invalid JSON in field spec {filename}: {e}") from e


def _soil(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    noise = rng.integers(-SOIL_NOISE, SOIL_NOISE + 1, size=(height, width, 3))
    return np.clip(np.array(SOIL_RGB) + noise, 0, 255).astype(np.uint8)


def _leaf_colour(rng: np.random.Generator, tau1: int, tau2: int) -> np.ndarray:
    hue = rng.uniform(tau1 + HUE_MARGIN, tau2 - HUE_MARGIN)
    sat = rng.uniform(*LEAF_SATURATION)
    val = rng.uniform(*LEAF_VALUE)
    rgb = colors.hsv_to_rgb([hue / 180.0, sat / 255.0, val / 255.0])
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def leaf_polygon(center: Tuple[float, float], angle: float, length: float, width: float) -> np.ndarray:
    """Corners (rows, cols) of a rectangle whose long side points along ``angle`` (y up)."""
    along = np.array([-math.sin(angle), math.cos(angle)]) * length / 2.0
    across = np.array([math.cos(angle), math.sin(angle)]) * width / 2.0
    c = np.asarray(center, dtype=np.float64)
    return np.array([c - along - across, c + along - across, c + along + across, c - along + across])


def generate_field(spec: FieldSpec) -> Tuple[RasterImage, FieldTruth]:
    """Render a jittered grid of plants with exponentially scattered leaves."""
    rng = np.random.default_rng(spec.seed)
    ci, cj = (spec.height - 1) / 2.0, (spec.width - 1) / 2.0
    row_ids, col_ids = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing='ij')
    row_ids, col_ids = row_ids.ravel(), col_ids.ravel()
    grid = np.column_stack([ci + (row_ids - (spec.rows - 1) / 2.0) * spec.inter_row,
                            cj + (col_ids - (spec.cols - 1) / 2.0) * spec.intra_row])
    jitter = rng.normal(0.0, 1.0, size=grid.shape) * np.array([spec.jitter_i, spec.jitter_j])
    plants = grid + jitter
    inside = (plants[:, 0] >= 0) & (plants[:, 0] <= spec.height - 1) \
        & (plants[:, 1] >= 0) & (plants[:, 1] <= spec.width - 1)
    if not inside.all():
        raise InputError(f"Plants {np.flatnonzero(~inside).tolist()} fall outside the image")

    image = _soil(rng, spec.height, spec.width)
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    polygons, records = [], []
    for p, plant in enumerate(plants):
        for _ in range(spec.leaves_per_plant):
            radius = rng.exponential(spec.radial_scale)
            bearing = rng.uniform(0.0, 2.0 * math.pi)
            angle = rng.uniform(0.0, math.pi)
            colour = _leaf_colour(rng, spec.tau1, spec.tau2)
            center = plant + radius * np.array([-math.sin(bearing), math.cos(bearing)])
            corners = leaf_polygon(center, angle, spec.leaf_length, spec.leaf_width)
            rr, cc = draw.polygon(corners[:, 0], corners[:, 1], shape=mask.shape)
            image[rr, cc] = colour
            mask[rr, cc] = True
            polygons.append(corners)
            records.append({'leaf_id': len(records), 'plant_id': p, 'center_i': center[0],
                            'center_j': center[1], 'angle': angle, 'pixels': len(rr)})

    leaves = pd.DataFrame(records, columns=['leaf_id', 'plant_id', 'center_i', 'center_j', 'angle', 'pixels'])
    truth = FieldTruth(plants=plants, row_ids=row_ids, col_ids=col_ids, grid=grid,
                       leaves=leaves, polygons=polygons, mask=mask)
    logger.info(f"Synthetic field {spec.width}x{spec.height}: {len(plants)} plants, "
                f"{truth.leaf_count} leaves, {int(mask.sum())} leaf pixels")
    return RasterImage.from_array(image), truth


def generate_leaf_tiles(n_leaves: int = 50, vary_area: bool = True, seed: int = 7,
                        per_row: int = 10, leaf_width: int = 6,
                        tau1: int = SEGMENTATION_THRESHOLDS['tau1'],
                        tau2: int = SEGMENTATION_THRESHOLDS['tau2']) -> Tuple[RasterImage, FieldTruth]:
    """Non-overlapping axis-aligned leaves laid out ``per_row`` to a row of cells.

    With ``vary_area`` the lengths cycle through 16..24 px (areas within 20% of
    the mean) so every run of ``len(TILE_LEAF_LENGTHS)`` leaves has the same
    total area; otherwise all leaves are 20 px long.
    """
    if n_leaves < 1 or per_row < 1:
        raise InputError("Leaf tiles need at least one leaf per row")
    cell_h, cell_w = leaf_width + 10, max(TILE_LEAF_LENGTHS) + 8
    n_rows = int(math.ceil(n_leaves / per_row))
    rng = np.random.default_rng(seed)
    image = _soil(rng, n_rows * cell_h, per_row * cell_w)
    mask = np.zeros(image.shape[:2], dtype=bool)
    polygons, records = [], []
    for k in range(n_leaves):
        length = TILE_LEAF_LENGTHS[k % len(TILE_LEAF_LENGTHS)] if vary_area else 20
        r0 = (k // per_row) * cell_h + 5
        c0 = (k % per_row) * cell_w + 4
        image[r0:r0 + leaf_width, c0:c0 + length] = _leaf_colour(rng, tau1, tau2)
        mask[r0:r0 + leaf_width, c0:c0 + length] = True
        polygons.append(np.array([[r0, c0], [r0, c0 + length], [r0 + leaf_width, c0 + length],
                                  [r0 + leaf_width, c0]], dtype=np.float64))
        records.append({'leaf_id': k, 'plant_id': -1, 'center_i': r0 + (leaf_width - 1) / 2.0,
                        'center_j': c0 + (length - 1) / 2.0, 'angle': 0.0, 'pixels': leaf_width * length})
    leaves = pd.DataFrame(records, columns=['leaf_id', 'plant_id', 'center_i', 'center_j', 'angle', 'pixels'])
    empty = np.zeros((0, 2))
    truth = FieldTruth(plants=empty, row_ids=np.zeros(0, dtype=int), col_ids=np.zeros(0, dtype=int),
                       grid=empty, leaves=leaves, polygons=polygons, mask=mask)
    return RasterImage.from_array(image), truth


def tile_region(k: int, per_row: int = 10, leaf_width: int = 6) -> Tuple[int, int, int, int]:
    """Bounds (row0, col0, row1, col1) of the ``k``-th row of cells from generate_leaf_tiles."""
    cell_h, cell_w = leaf_width + 10, max(TILE_LEAF_LENGTHS) + 8
    return k * cell_h, 0, (k + 1) * cell_h, per_row * cell_w


def score_localization(est: PlantConfiguration, truth_plants: np.ndarray) -> Tuple[float, float, List[Tuple[int, int]]]:
    """Mean and max distance after one-to-one matching of estimates to truth.

    Exact assignment (Hungarian) up to HUNGARIAN_LIMIT plants, greedy on
    sorted distances beyond that.
    """
    truth_plants = np.asarray(truth_plants, dtype=np.float64).reshape(-1, 2)
    if est.count != len(truth_plants):
        raise InputError(f"Estimated {est.count} plants but truth has {len(truth_plants)}")
    cost = distance.cdist(est.plants, truth_plants)
    if est.count <= HUNGARIAN_LIMIT:
        rows, cols = linear_sum_assignment(cost)
        pairs = sorted(zip(rows.tolist(), cols.tolist()))
    else:
        order = np.argsort(cost, axis=None, kind='stable')
        used_e, used_t, pairs = set(), set(), []
        for flat in order.tolist():
            e, t = divmod(flat, cost.shape[1])
            if e in used_e or t in used_t:
                continue
            used_e.add(e)
            used_t.add(t)
            pairs.append((e, t))
        pairs.sort()
    errors = np.array([cost[e, t] for e, t in pairs])
    return float(errors.mean()), float(errors.max()), pairs


def write_truth(truth: FieldTruth, out_dir: str) -> None:
    """plants.csv (truth), plants_init.csv (planting grid), leaves.csv and mask.png."""
    os.makedirs(out_dir, exist_ok=True)
    if len(truth.plants):
        write_plants(truth.configuration, os.path.join(out_dir, 'plants.csv'), truth.assignment)
        write_plants(PlantConfiguration(truth.grid), os.path.join(out_dir, 'plants_init.csv'), truth.assignment)
    truth.leaves.to_csv(os.path.join(out_dir, 'leaves.csv'), index=False, float_format='%.6f')
    save_mask(LeafMask.from_array(truth.mask), os.path.join(out_dir, 'mask.png'))

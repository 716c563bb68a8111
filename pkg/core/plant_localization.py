"""MAP estimation of plant stalk positions from the leaf mask.

Every leaf pixel is explained by its nearest plant through an exponential
distance likelihood; plant positions carry a Gaussian prior pulling each
plant towards the lines (rows and columns) of its neighbours. Positions are
refined one plant at a time by exhaustive search over an integer window
(iterative coordinate descent).
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import distance

from core.exceptions import EmptyClusterError, InputError
from core.leaf_segmentation import LeafMask
from inputs.constants import LOCALIZATION_DEFAULTS

logger = logging.getLogger(__name__)

# candidate x affected-pixel products evaluated per block
_COST_BLOCK = 2_000_000


class LocalizationMode(str, Enum):
    FULL = 'full'
    NO_PRIOR = 'no_prior'
    NO_INTRA_ROW = 'no_intra_row'


@dataclass(frozen=True, eq=False)
class LeafPixelSet:
    coords: np.ndarray  # (N, 2) rows, cols
    shape: Tuple[int, int]

    @property
    def n(self) -> int:
        return len(self.coords)


@dataclass(frozen=True, eq=False)
class PlantConfiguration:
    plants: np.ndarray  # (P, 2) real-valued (i, j)

    def __post_init__(self):
        plants = np.asarray(self.plants, dtype=np.float64).reshape(-1, 2)
        if len(plants) < 1:
            raise InputError("At least one plant is required")
        if not np.all(np.isfinite(plants)):
            raise InputError("Plant coordinates must be finite")
        object.__setattr__(self, 'plants', plants)

    @property
    def count(self) -> int:
        return len(self.plants)

    def with_plant(self, p: int, position: Sequence[float]) -> 'PlantConfiguration':
        plants = self.plants.copy()
        plants[p] = position
        return PlantConfiguration(plants)

    def check_bounds(self, shape: Tuple[int, int]) -> None:
        h, w = shape
        inside = (self.plants[:, 0] >= 0) & (self.plants[:, 0] <= h - 1) \
            & (self.plants[:, 1] >= 0) & (self.plants[:, 1] <= w - 1)
        if not inside.all():
            raise InputError(f"Plants {np.flatnonzero(~inside).tolist()} lie outside the {w}x{h} image")


@dataclass(frozen=True, eq=False)
class RowColumnAssignment:
    row_of: np.ndarray
    col_of: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'row_of', np.asarray(self.row_of, dtype=np.int64))
        object.__setattr__(self, 'col_of', np.asarray(self.col_of, dtype=np.int64))
        if self.row_of.shape != self.col_of.shape:
            raise InputError("Every plant needs exactly one row and one column id")


@dataclass(frozen=True)
class PriorParams:
    mu: Tuple[float, float]
    sigma_i: float
    sigma_j: float


@dataclass(frozen=True)
class ScaleParam:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise InputError("Scale parameter sigma must be positive")


@dataclass(frozen=True)
class LocalizationConfig:
    mode: LocalizationMode = LocalizationMode(LOCALIZATION_DEFAULTS['mode'])
    window: int = LOCALIZATION_DEFAULTS['window']
    sweeps: int = LOCALIZATION_DEFAULTS['sweeps']
    epsilon: float = LOCALIZATION_DEFAULTS['epsilon']
    sigma_floor: float = LOCALIZATION_DEFAULTS['sigma_floor']
    closed_form: bool = LOCALIZATION_DEFAULTS['closed_form']

    def __post_init__(self):
        object.__setattr__(self, 'mode', LocalizationMode(self.mode))
        if self.window < 0:
            raise InputError("Search window half-width cannot be negative")
        if self.sweeps < 1:
            raise InputError("At least one ICD sweep is required")
        if self.epsilon < 0 or self.sigma_floor <= 0:
            raise InputError("epsilon must be >= 0 and sigma_floor > 0")
        if self.closed_form and self.mode != LocalizationMode.NO_PRIOR:
            raise InputError("The closed-form update only applies to the no_prior mode")


@dataclass
class IcdResult:
    plants: PlantConfiguration
    sigma: ScaleParam
    trace: List[float] = field(default_factory=list)
    trace_sweep: List[int] = field(default_factory=list)
    sweeps: int = 0
    empty_clusters: List[int] = field(default_factory=list)


# ----------------------------------------------------------------------------
# Likelihood
# ----------------------------------------------------------------------------

def build_pixel_set(mask: LeafMask) -> LeafPixelSet:
    coords = np.argwhere(mask.bits)
    if len(coords) == 0:
        raise InputError("The leaf mask is empty; plant locations are undefined")
    return LeafPixelSet(coords=coords, shape=(mask.height, mask.width))


def _nearest(coords: np.ndarray, plants: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    dist = distance.cdist(coords, plants)
    index = np.argmin(dist, axis=1)
    return index, dist[np.arange(len(coords)), index]


def nearest_plant(z, x: PlantConfiguration) -> Tuple[int, float]:
    index, dist = _nearest(np.asarray(z, dtype=np.float64).reshape(1, 2), x.plants)
    return int(index[0]), float(dist[0])


def neg_log_likelihood(zset: LeafPixelSet, x: PlantConfiguration, sigma: ScaleParam) -> float:
    _, dist = _nearest(zset.coords, x.plants)
    return zset.n * math.log(sigma.sigma) + dist.sum() / sigma.sigma


def estimate_sigma(zset: LeafPixelSet, x: PlantConfiguration,
                   sigma_floor: float = LOCALIZATION_DEFAULTS['sigma_floor']) -> ScaleParam:
    """Maximum-likelihood scale: mean distance to the nearest plant."""
    _, dist = _nearest(zset.coords, x.plants)
    return ScaleParam(max(float(dist.mean()), sigma_floor))


# ----------------------------------------------------------------------------
# Prior
# ----------------------------------------------------------------------------

def _leave_one_out(values: np.ndarray, sigma_floor: float) -> Tuple[float, float]:
    if len(values) == 0:
        return math.nan, math.inf
    if len(values) == 1:
        return float(values[0]), sigma_floor
    return float(values.mean()), max(float(values.std(ddof=1)), sigma_floor)


def prior_params(x: PlantConfiguration, assign: RowColumnAssignment, p: int,
                 sigma_floor: float = LOCALIZATION_DEFAULTS['sigma_floor']) -> PriorParams:
    """Leave-one-out line statistics: row mates fix the i prior, column mates the j prior."""
    if len(assign.row_of) != x.count:
        raise InputError("Row/column assignment does not match the plant count")
    others = np.arange(x.count) != p
    row_mates = others & (assign.row_of == assign.row_of[p])
    col_mates = others & (assign.col_of == assign.col_of[p])
    mu_i, sigma_i = _leave_one_out(x.plants[row_mates, 0], sigma_floor)
    mu_j, sigma_j = _leave_one_out(x.plants[col_mates, 1], sigma_floor)
    return PriorParams(mu=(mu_i, mu_j), sigma_i=sigma_i, sigma_j=sigma_j)


def prior_term(candidates, prior: PriorParams, mode: LocalizationMode) -> np.ndarray:
    """Half squared Mahalanobis distance of candidate(s) to the prior mean."""
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    term = np.zeros(len(candidates))
    if mode == LocalizationMode.NO_PRIOR:
        return term
    if mode == LocalizationMode.FULL and math.isfinite(prior.sigma_i):
        term += 0.5 * ((candidates[:, 0] - prior.mu[0]) / prior.sigma_i) ** 2
    if math.isfinite(prior.sigma_j):
        term += 0.5 * ((candidates[:, 1] - prior.mu[1]) / prior.sigma_j) ** 2
    return term


def map_cost(p: int, candidate: Sequence[float], zset: LeafPixelSet, x: PlantConfiguration,
             sigma: ScaleParam, prior: PriorParams, mode: LocalizationMode) -> float:
    """Cost of moving plant ``p`` to ``candidate`` with every other plant held fixed."""
    moved = x.with_plant(p, candidate)
    _, dist = _nearest(zset.coords, moved.plants)
    return float(dist.sum() / sigma.sigma + prior_term(candidate, prior, LocalizationMode(mode))[0])


def candidate_window(center: Sequence[float], window: int,
                     shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Integer rows and columns within +-window of the rounded centre, clipped to the image."""
    ci, cj = (int(math.floor(c + 0.5)) for c in center)
    h, w = shape
    rows = np.arange(max(0, ci - window), min(h - 1, ci + window) + 1)
    cols = np.arange(max(0, cj - window), min(w - 1, cj + window) + 1)
    return rows, cols


def cost_map(p: int, zset: LeafPixelSet, x: PlantConfiguration, sigma: ScaleParam,
             prior: PriorParams, mode: LocalizationMode, rows: np.ndarray,
             cols: np.ndarray) -> np.ndarray:
    """map_cost over the candidate grid rows x cols, evaluated incrementally.

    Only pixels whose nearest plant could become ``p`` for some candidate are
    re-scored; every other pixel contributes its fixed distance to the
    remaining plants.
    """
    coords = zset.coords.astype(np.float64)
    if x.count > 1:
        others = np.delete(x.plants, p, axis=0)
        _, d_other = _nearest(coords, others)
    else:
        d_other = np.full(len(coords), np.inf)

    gap_i = np.maximum.reduce([rows[0] - coords[:, 0], np.zeros(len(coords)), coords[:, 0] - rows[-1]])
    gap_j = np.maximum.reduce([cols[0] - coords[:, 1], np.zeros(len(coords)), coords[:, 1] - cols[-1]])
    affected = np.hypot(gap_i, gap_j) < d_other
    base = float(d_other[~affected].sum())
    z_aff = coords[affected]
    d_aff = d_other[affected]

    grid_i, grid_j = np.meshgrid(rows, cols, indexing='ij')
    candidates = np.column_stack([grid_i.ravel(), grid_j.ravel()]).astype(np.float64)
    sums = np.empty(len(candidates))
    block = max(1, _COST_BLOCK // max(1, len(z_aff)))
    for start in range(0, len(candidates), block):
        part = candidates[start:start + block]
        dist = distance.cdist(part, z_aff) if len(z_aff) else np.zeros((len(part), 0))
        sums[start:start + block] = np.minimum(dist, d_aff).sum(axis=1)
    costs = (base + sums) / sigma.sigma + prior_term(candidates, prior, LocalizationMode(mode))
    return costs.reshape(len(rows), len(cols))


def kmeans_update(zset: LeafPixelSet, x: PlantConfiguration, p: int) -> Tuple[float, float]:
    """Centroid of the pixels whose nearest plant is ``p``."""
    index, _ = _nearest(zset.coords, x.plants)
    members = zset.coords[index == p]
    if len(members) == 0:
        raise EmptyClusterError(p)
    centroid = members.mean(axis=0)
    return float(centroid[0]), float(centroid[1])


# ----------------------------------------------------------------------------
# Iterative coordinate descent
# ----------------------------------------------------------------------------

def total_cost(zset: LeafPixelSet, x: PlantConfiguration, sigma: ScaleParam,
               priors: Sequence[PriorParams], mode: LocalizationMode) -> float:
    nll = neg_log_likelihood(zset, x, sigma)
    return nll + float(sum(prior_term(x.plants[p], priors[p], mode)[0] for p in range(x.count)))


def icd_optimize(zset: LeafPixelSet, x0: PlantConfiguration, assign: RowColumnAssignment,
                 config: LocalizationConfig = LocalizationConfig()) -> IcdResult:
    """Sweep over plants in index order, moving each to its best candidate in the window.

    Prior parameters are frozen during a sweep and sigma is re-estimated
    after it, so the recorded total cost never increases within a sweep.
    """
    x0.check_bounds(zset.shape)
    if len(assign.row_of) != x0.count:
        raise InputError("Row/column assignment does not match the plant count")
    mode = config.mode
    x = x0
    sigma = estimate_sigma(zset, x, config.sigma_floor)
    result = IcdResult(plants=x, sigma=sigma)
    empty = set()

    for sweep in range(1, config.sweeps + 1):
        priors = [prior_params(x, assign, p, config.sigma_floor) for p in range(x.count)]
        start_cost = total_cost(zset, x, sigma, priors, mode)
        current_total = start_cost
        for p in range(x.count):
            current = map_cost(p, x.plants[p], zset, x, sigma, priors[p], mode)
            if config.closed_form:
                try:
                    best = np.array(kmeans_update(zset, x, p))
                except EmptyClusterError as e:
                    empty.add(e.plant_index)
                    logger.warning(f"Plant {p} owns no leaf pixels in sweep {sweep}")
                    continue
                best_cost = map_cost(p, best, zset, x, sigma, priors[p], mode)
            else:
                index, _ = _nearest(zset.coords, x.plants)
                if not np.any(index == p):
                    empty.add(p)
                    logger.warning(f"Plant {p} owns no leaf pixels in sweep {sweep}")
                rows, cols = candidate_window(x.plants[p], config.window, zset.shape)
                costs = cost_map(p, zset, x, sigma, priors[p], mode, rows, cols)
                k = int(np.argmin(costs))
                best = np.array([rows[k // len(cols)], cols[k % len(cols)]], dtype=np.float64)
                best_cost = float(costs.flat[k])
            if best_cost < current - 1e-12:
                x = x.with_plant(p, best)
                current_total += best_cost - current
                result.trace.append(current_total)
                result.trace_sweep.append(sweep)
        sigma = estimate_sigma(zset, x, config.sigma_floor)
        result.sweeps = sweep
        improvement = start_cost - current_total
        logger.info(f"ICD sweep {sweep}: cost {current_total:.4f}, sigma {sigma.sigma:.3f} px")
        if improvement < config.epsilon:
            break

    result.plants = x
    result.sigma = sigma
    result.empty_clusters = sorted(empty)
    return result


# ----------------------------------------------------------------------------
# Rows, columns and regions
# ----------------------------------------------------------------------------

def _gap_clusters(values: np.ndarray, n_groups: int) -> np.ndarray:
    order = np.argsort(values, kind='stable')
    labels = np.zeros(len(values), dtype=np.int64)
    if n_groups <= 1 or len(values) <= 1:
        return labels
    gaps = np.diff(values[order])
    cuts = np.sort(np.argsort(-gaps, kind='stable')[:n_groups - 1])
    group = np.zeros(len(values), dtype=np.int64)
    for cut in cuts:
        group[cut + 1:] += 1
    labels[order] = group
    return labels


def assign_rows_columns(x: PlantConfiguration, n_rows: int, n_cols: int) -> RowColumnAssignment:
    """Group plants into lines by splitting their coordinates at the largest gaps."""
    if n_rows < 1 or n_cols < 1:
        raise InputError("Row and column counts must be positive")
    return RowColumnAssignment(row_of=_gap_clusters(x.plants[:, 0], n_rows),
                               col_of=_gap_clusters(x.plants[:, 1], n_cols))


@dataclass(frozen=True, eq=False)
class Region:
    bounds: Tuple[int, int, int, int]  # row0, col0, row1, col1 (end-exclusive)
    init: PlantConfiguration
    assign: RowColumnAssignment


def localize_regions(mask: LeafMask, regions: Sequence[Region],
                     config: LocalizationConfig = LocalizationConfig(),
                     threads: int = 1) -> List[IcdResult]:
    """Run ICD independently on each crop; results are in full-mosaic coordinates."""

    def run(region: Region) -> IcdResult:
        r0, c0, r1, c1 = region.bounds
        if not (0 <= r0 < r1 <= mask.height and 0 <= c0 < c1 <= mask.width):
            raise InputError(f"Region {region.bounds} lies outside the mask")
        offset = np.array([r0, c0], dtype=np.float64)
        crop = LeafMask.from_array(mask.bits[r0:r1, c0:c1])
        local = PlantConfiguration(region.init.plants - offset)
        result = icd_optimize(build_pixel_set(crop), local, region.assign, config)
        return replace(result, plants=PlantConfiguration(result.plants.plants + offset))

    if threads > 1 and len(regions) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, regions))
    return [run(region) for region in regions]


# ----------------------------------------------------------------------------
# Files
# ----------------------------------------------------------------------------

def read_plants(filename: str) -> Tuple[PlantConfiguration, Optional[RowColumnAssignment]]:
    """Plant CSV ``plant_id,i,j[,row_id,col_id]`` sorted by plant_id."""
    if not os.path.exists(filename):
        raise InputError(f"Plant file not found: {filename}")
    try:
        frame = pd.read_csv(filename)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"Cannot parse plant file {filename}: {e}") from e
    missing = [c for c in ('plant_id', 'i', 'j') if c not in frame.columns]
    if missing:
        raise InputError(f"Plant file {filename} is missing columns {missing}")
    frame = frame.sort_values('plant_id', kind='mergesort')
    plants = PlantConfiguration(frame[['i', 'j']].to_numpy(dtype=np.float64))
    assign = None
    if {'row_id', 'col_id'} <= set(frame.columns):
        assign = RowColumnAssignment(frame['row_id'].to_numpy(), frame['col_id'].to_numpy())
    return plants, assign


def write_plants(x: PlantConfiguration, filename: str,
                 assign: Optional[RowColumnAssignment] = None) -> None:
    frame = pd.DataFrame({'plant_id': np.arange(x.count), 'i': x.plants[:, 0], 'j': x.plants[:, 1]})
    if assign is not None:
        frame['row_id'] = assign.row_of
        frame['col_id'] = assign.col_of
    os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
    frame.to_csv(filename, index=False, float_format='%.6f')

"""Colour segmentation of sorghum leaves and pixel-count based leaf counting."""
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.exceptions import InputError
from core.raster import RasterImage, process_row_blocks, rgb_to_hsv_array, save_image
from inputs.constants import HEATMAP_WINDOW, SEGMENTATION_THRESHOLDS

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentationThresholds:
    tau1: int = SEGMENTATION_THRESHOLDS['tau1']
    tau2: int = SEGMENTATION_THRESHOLDS['tau2']
    tau3: int = SEGMENTATION_THRESHOLDS['tau3']
    tau4: int = SEGMENTATION_THRESHOLDS['tau4']

    def __post_init__(self):
        if not (0 <= self.tau1 <= self.tau2 < 180):
            raise InputError(f"Hue bounds must satisfy 0 <= tau1 <= tau2 < 180, got {self.tau1}, {self.tau2}")
        for name in ('tau3', 'tau4'):
            if not 0 <= getattr(self, name) <= 255:
                raise InputError(f"{name} must be in [0, 255]")

    @classmethod
    def from_dict(cls, data: dict) -> 'SegmentationThresholds':
        return cls(**{k: int(data[k]) for k in ('tau1', 'tau2', 'tau3', 'tau4') if k in data})


@dataclass(frozen=True)
class LeafMask:
    width: int
    height: int
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.bits.shape != (self.height, self.width) or self.bits.dtype != bool:
            raise InputError("Mask bits must be a boolean (height, width) array")
        self.bits.setflags(write=False)

    @classmethod
    def from_array(cls, bits: np.ndarray) -> 'LeafMask':
        data = np.array(bits, dtype=bool, copy=True)
        if data.ndim != 2:
            raise InputError("Mask must be two-dimensional")
        return cls(width=data.shape[1], height=data.shape[0], bits=data)

    def to_image(self) -> RasterImage:
        return RasterImage.from_array(np.where(self.bits, 255, 0).astype(np.uint8))


@dataclass(frozen=True)
class LeafCountCalibration:
    rho: float

    def __post_init__(self):
        if not self.rho > 0:
            raise InputError("rho (pixels per leaf) must be positive")


@dataclass(frozen=True)
class LeafCountEstimate:
    value: float
    rounded: int


@dataclass(frozen=True)
class DensityMap:
    width: int
    height: int
    counts: np.ndarray = field(repr=False)
    window: int = HEATMAP_WINDOW


def segment_leaves(img: RasterImage, th: SegmentationThresholds, threads: int = 1) -> LeafMask:
    """Y = tau1 <= H <= tau2 and (tau3 <= S or tau4 <= V)."""
    if img.channels != 3:
        raise InputError("Leaf segmentation needs a 3-channel RGB image")
    if img.bit_depth != 8:
        raise InputError("Leaf segmentation needs 8-bit samples")

    def segment_rows(row_start: int, row_stop: int) -> np.ndarray:
        hsv = rgb_to_hsv_array(img.samples[row_start:row_stop])
        h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
        return (th.tau1 <= h) & (h <= th.tau2) & ((th.tau3 <= s) | (th.tau4 <= v))

    bits = process_row_blocks(img.height, segment_rows, threads)
    mask = LeafMask.from_array(bits)
    logger.info(f"Segmented {int(bits.sum())} leaf pixels out of {bits.size}")
    return mask


def count_pixels(mask: LeafMask) -> int:
    return int(np.count_nonzero(mask.bits))


def calibrate_rho(alpha0: int, lambda0: int) -> LeafCountCalibration:
    """Pixels per leaf from a hand-counted calibration region."""
    if alpha0 < 1 or lambda0 < 1:
        raise InputError("Calibration needs at least one leaf pixel and one counted leaf")
    return LeafCountCalibration(rho=alpha0 / lambda0)


def calibrate_rho_from_region(mask: LeafMask, region: Tuple[int, int, int, int],
                              lambda0: int) -> LeafCountCalibration:
    """Calibrate on the mask pixels inside ``region`` = (row0, col0, row1, col1), end-exclusive."""
    r0, c0, r1, c1 = region
    if not (0 <= r0 < r1 <= mask.height and 0 <= c0 < c1 <= mask.width):
        raise InputError(f"Calibration region {region} lies outside the {mask.width}x{mask.height} mask")
    alpha0 = int(np.count_nonzero(mask.bits[r0:r1, c0:c1]))
    cal = calibrate_rho(alpha0, lambda0)
    logger.info(f"Calibrated rho={cal.rho:.3f} px/leaf from {alpha0} pixels and {lambda0} leaves")
    return cal


def estimate_leaf_count(alpha: int, cal: LeafCountCalibration) -> LeafCountEstimate:
    value = alpha / cal.rho
    return LeafCountEstimate(value=value, rounded=int(np.floor(value + 0.5)))


def density_heatmap(mask: LeafMask, window: int = HEATMAP_WINDOW) -> DensityMap:
    """Leaf pixels inside the window centred on each pixel (summed-area table, truncated borders)."""
    if window < 1 or window % 2 == 0:
        raise InputError(f"Heat map window must be a positive odd number, got {window}")
    h, w = mask.height, mask.width
    table = np.zeros((h + 1, w + 1), dtype=np.int64)
    table[1:, 1:] = np.cumsum(np.cumsum(mask.bits, axis=0, dtype=np.int64), axis=1)

    half = window // 2
    rows = np.arange(h)
    cols = np.arange(w)
    top = np.clip(rows - half, 0, h)[:, np.newaxis]
    bottom = np.clip(rows + half + 1, 0, h)[:, np.newaxis]
    left = np.clip(cols - half, 0, w)[np.newaxis, :]
    right = np.clip(cols + half + 1, 0, w)[np.newaxis, :]
    counts = table[bottom, right] - table[top, right] - table[bottom, left] + table[top, left]
    return DensityMap(width=w, height=h, counts=counts, window=window)


def save_mask(mask: LeafMask, path: str) -> None:
    save_image(mask.to_image(), path)


def save_density_map(density: DensityMap, png_path: str, csv_path: Optional[str] = None) -> None:
    """16-bit PNG of the raw counts, plus an optional CSV of the same grid."""
    if density.counts.max(initial=0) > np.iinfo(np.uint16).max:
        raise InputError("Heat map counts exceed the 16-bit PNG range")
    save_image(RasterImage.from_array(density.counts.astype(np.uint16)), png_path)
    if csv_path:
        os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
        pd.DataFrame(density.counts).to_csv(csv_path, header=False, index=False)


def count_leaves_in_image(img: RasterImage, th: SegmentationThresholds, cal: LeafCountCalibration,
                          threads: int = 1) -> Tuple[LeafMask, int, LeafCountEstimate]:
    mask = segment_leaves(img, th, threads=threads)
    alpha = count_pixels(mask)
    estimate = estimate_leaf_count(alpha, cal)
    logger.info(f"alpha={alpha}, rho={cal.rho:.3f} -> {estimate.value:.2f} leaves ({estimate.rounded})")
    return mask, alpha, estimate


def count_leaves_in_tiles(masks: Sequence[LeafMask], cal: LeafCountCalibration) -> pd.DataFrame:
    """Per-tile leaf counts for a set of plot masks."""
    rows = []
    for idx, mask in enumerate(masks):
        alpha = count_pixels(mask)
        estimate = estimate_leaf_count(alpha, cal)
        rows.append({'tile': idx, 'alpha': alpha, 'lambda': estimate.value, 'lambda_rounded': estimate.rounded})
    return pd.DataFrame(rows, columns=['tile', 'alpha', 'lambda', 'lambda_rounded'])

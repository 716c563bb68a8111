"""Colour previews: leaf overlays, plant markers, cost maps and heat maps."""
import logging
from typing import Optional, Sequence

import numpy as np
from matplotlib import colormaps
from skimage import draw

from core.leaf_morphology import LeafSegment
from core.leaf_segmentation import DensityMap
from core.plant_localization import PlantConfiguration
from core.raster import RasterImage

logger = logging.getLogger(__name__)

ESTIMATE_RGB = (255, 0, 0)
TRUTH_RGB = (0, 255, 0)


def _as_rgb(img: RasterImage) -> np.ndarray:
    data = img.samples
    if img.bit_depth == 16:
        data = (data >> 8).astype(np.uint8)
    if img.channels == 1:
        data = np.repeat(data, 3, axis=2)
    return np.array(data, dtype=np.uint8)


def leaf_overlay(img: RasterImage, segments: Sequence[LeafSegment], alpha: float = 0.6) -> RasterImage:
    """Blend one tab20 colour per leaf over the source image."""
    canvas = _as_rgb(img).astype(np.float64)
    palette = colormaps['tab20']
    for k, seg in enumerate(segments):
        colour = np.array(palette(k % palette.N)[:3]) * 255.0
        rows, cols = seg.pixels[:, 0], seg.pixels[:, 1]
        canvas[rows, cols] = (1.0 - alpha) * canvas[rows, cols] + alpha * colour
    return RasterImage.from_array(np.floor(canvas + 0.5).astype(np.uint8))


def _dots(canvas: np.ndarray, plants: PlantConfiguration, colour, radius: float) -> None:
    for i, j in plants.plants:
        rr, cc = draw.disk((i, j), radius, shape=canvas.shape[:2])
        canvas[rr, cc] = colour


def plant_overlay(img: RasterImage, estimated: PlantConfiguration,
                  truth: Optional[PlantConfiguration] = None, radius: float = 3.0) -> RasterImage:
    """Estimated plants as red dots, ground truth (when known) as green dots underneath."""
    canvas = _as_rgb(img)
    if truth is not None:
        _dots(canvas, truth, TRUTH_RGB, radius)
    _dots(canvas, estimated, ESTIMATE_RGB, radius)
    return RasterImage.from_array(canvas)


def cost_map_image(costs: np.ndarray, gamma: Optional[float] = None) -> RasterImage:
    """8-bit grayscale cost map, low cost dark; ``gamma`` stretches the low end."""
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        return RasterImage.from_array(np.zeros(costs.shape, dtype=np.uint8))
    lo, hi = costs[finite].min(), costs[finite].max()
    scaled = np.zeros(costs.shape) if hi == lo else (np.where(finite, costs, hi) - lo) / (hi - lo)
    if gamma is not None:
        scaled = scaled ** gamma
    return RasterImage.from_array(np.floor(scaled * 255.0 + 0.5).astype(np.uint8))


def heatmap_preview(density: DensityMap, cmap: str = 'viridis') -> RasterImage:
    """Colour preview scaled to the full window area."""
    scaled = density.counts / float(density.window * density.window)
    rgba = colormaps[cmap](np.clip(scaled, 0.0, 1.0))
    return RasterImage.from_array(np.floor(rgba[..., :3] * 255.0 + 0.5).astype(np.uint8))

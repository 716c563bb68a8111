import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from core.exceptions import InputError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Coordinates within this distance of the raster border still sample the edge pixel.
_EDGE_EPS = 1e-6


@dataclass(frozen=True)
class RasterImage:
    """Immutable raster, samples stored as a (height, width, channels) array."""
    width: int
    height: int
    channels: int
    samples: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InputError("Raster dimensions must be at least 1x1")
        if self.channels not in (1, 3):
            raise InputError(f"Unsupported channel count: {self.channels}")
        if self.samples.dtype not in (np.uint8, np.uint16):
            raise InputError(f"Unsupported sample type: {self.samples.dtype}")
        if self.samples.shape != (self.height, self.width, self.channels):
            raise InputError(
                f"Sample array shape {self.samples.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}")
        self.samples.setflags(write=False)

    @classmethod
    def from_array(cls, array: np.ndarray) -> 'RasterImage':
        """Wrap a (h, w) or (h, w, c) uint8/uint16 array; the array is copied."""
        data = np.array(array, copy=True)
        if data.ndim == 2:
            data = data[:, :, np.newaxis]
        if data.ndim != 3:
            raise InputError(f"Expected a 2-D or 3-D array, got {data.ndim} dimensions")
        return cls(width=data.shape[1], height=data.shape[0], channels=data.shape[2], samples=data)

    @property
    def bit_depth(self) -> int:
        return 16 if self.samples.dtype == np.uint16 else 8

    def plane(self) -> np.ndarray:
        """Samples as (h, w) for single-channel images, (h, w, 3) otherwise."""
        return self.samples[:, :, 0] if self.channels == 1 else self.samples


@dataclass(frozen=True)
class HsvTriplet:
    h: int
    s: int
    v: int

    def __post_init__(self):
        if not (0 <= self.h < 180 and 0 <= self.s <= 255 and 0 <= self.v <= 255):
            raise InputError(f"HSV triplet out of range: ({self.h}, {self.s}, {self.v})")


@dataclass(frozen=True)
class PixelCoord:
    i: int
    j: int

    def within(self, height: int, width: int) -> bool:
        return 0 <= self.i < height and 0 <= self.j < width


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Hexcone HSV for an (..., 3) array of 8-bit RGB.

    Hue is halved into [0, 180) and every channel is rounded half-up to an
    integer. Achromatic pixels get hue 0.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.max(rgb, axis=-1)
    delta = v - np.min(rgb, axis=-1)
    chromatic = delta > 0
    safe_delta = np.where(chromatic, delta, 1.0)

    # channel priority when two channels tie for the maximum: r, then g, then b
    hue_r = np.mod(60.0 * (g - b) / safe_delta, 360.0)
    hue_g = 60.0 * ((b - r) / safe_delta + 2.0)
    hue_b = 60.0 * ((r - g) / safe_delta + 4.0)
    hue = np.where(r == v, hue_r, np.where(g == v, hue_g, hue_b))
    hue = np.where(chromatic, hue, 0.0)

    h = _round_half_up(hue / 2.0)
    h = np.where(h >= 180, h - 180, h)
    s = np.where(v > 0, _round_half_up(255.0 * delta / np.where(v > 0, v, 1.0)), 0.0)
    return np.stack([h, s, v], axis=-1).astype(np.int32)


def rgb_to_hsv(r: int, g: int, b: int) -> HsvTriplet:
    h, s, v = rgb_to_hsv_array(np.array([r, g, b]))
    return HsvTriplet(int(h), int(s), int(v))


def load_image(path: str) -> RasterImage:
    """Read an 8-bit L/RGB or 16-bit grayscale PNG."""
    if not os.path.exists(path):
        raise InputError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ('L', 'RGB'):
                data = np.asarray(img, dtype=np.uint8)
            elif mode.startswith('I;16'):
                data = np.asarray(img).astype(np.uint16)
            elif mode == 'I':
                raw = np.asarray(img)
                if raw.min() < 0 or raw.max() > 65535:
                    raise InputError(f"Unsupported bit depth in {path}")
                data = raw.astype(np.uint16)
            elif mode == '1':
                data = np.asarray(img.convert('L'), dtype=np.uint8)
            else:
                raise InputError(f"Unsupported image mode {mode} in {path}")
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise InputError(f"Cannot decode image {path}: {e}") from e
    logger.debug(f"Loaded {path}: {data.shape} {data.dtype}")
    return RasterImage.from_array(data)


def save_image(image: RasterImage, path: str) -> None:
    """Write an image as PNG, 16-bit grayscale when the samples are uint16."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    data = image.plane()
    if image.bit_depth == 16:
        if image.channels != 1:
            raise InputError("16-bit output is only supported for grayscale images")
        pil_image = Image.fromarray(np.ascontiguousarray(data, dtype=np.uint16))
    else:
        pil_image = Image.fromarray(np.ascontiguousarray(data, dtype=np.uint8))
    try:
        pil_image.save(path, format='PNG')
    except OSError as e:
        raise InputError(f"Cannot write image {path}: {e}") from e
    logger.debug(f"Saved {path}")


def bilinear_sample(samples: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinearly sample an (h, w) or (h, w, c) array at fractional positions.

    Positions outside the raster (or non-finite) yield 0. The result keeps the
    dtype of ``samples`` with half-up rounding.
    """
    data = np.asarray(samples)
    single = data.ndim == 2
    if single:
        data = data[:, :, np.newaxis]
    h, w = data.shape[:2]
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)

    finite = np.isfinite(rows) & np.isfinite(cols)
    r = np.where(finite, rows, 0.0)
    c = np.where(finite, cols, 0.0)
    valid = finite & (r >= -_EDGE_EPS) & (r <= h - 1 + _EDGE_EPS) & (c >= -_EDGE_EPS) & (c <= w - 1 + _EDGE_EPS)
    r = np.clip(r, 0.0, h - 1)
    c = np.clip(c, 0.0, w - 1)

    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[..., np.newaxis]
    fc = (c - c0)[..., np.newaxis]

    values = data.astype(np.float64)
    top = values[r0, c0] * (1.0 - fc) + values[r0, c1] * fc
    bottom = values[r1, c0] * (1.0 - fc) + values[r1, c1] * fc
    out = top * (1.0 - fr) + bottom * fr
    out = np.where(valid[..., np.newaxis], out, 0.0)

    limit = np.iinfo(data.dtype).max if np.issubdtype(data.dtype, np.integer) else None
    if limit is not None:
        out = np.clip(_round_half_up(out), 0, limit)
    out = out.astype(data.dtype)
    return out[..., 0] if single else out


def process_row_blocks(height: int, block_fn: Callable[[int, int], np.ndarray],
                       threads: int = 1) -> np.ndarray:
    """Run ``block_fn(row_start, row_stop)`` over horizontal bands and stack the results.

    Bands are disjoint, so the output does not depend on the thread count.
    """
    threads = max(1, int(threads))
    if threads == 1 or height < 2:
        return block_fn(0, height)
    bounds = np.linspace(0, height, min(threads, height) + 1).astype(int)
    spans: Tuple[Tuple[int, int], ...] = tuple(
        (int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda span: block_fn(*span), spans))
    return np.concatenate(parts, axis=0)

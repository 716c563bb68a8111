"""SMAC interior orientation: principal-point reduction, radial and
decentering corrections, their inverse, and distortion-free resampling.

Image-plane coordinates are millimetres with the origin at the image centre,
+x to the right and +y up. Corrections are added to the reduced coordinates:
``xc = x - xp + dx_radial + dx_decentering``.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from core.exceptions import ConvergenceError, InputError
from core.raster import RasterImage, bilinear_sample, process_row_blocks
from inputs.constants import (SMAC_DEFAULT_R0, SMAC_INVERSION_MAX_ITER, SMAC_INVERSION_RELAXATION,
                              SMAC_INVERSION_TOL)

logger = logging.getLogger(__name__)

CAMERA_KEYS = ('xp', 'yp', 'k0', 'k1', 'k2', 'k3', 'p1', 'p2', 'r0',
               'focal', 'pixel_pitch', 'sensor_width', 'sensor_height')


@dataclass(frozen=True)
class SmacCamera:
    """Interior orientation and SMAC distortion coefficients (lengths in mm)."""
    focal: float
    pixel_pitch: float
    sensor_width: int
    sensor_height: int
    xp: float = 0.0
    yp: float = 0.0
    k0: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    r0: float = SMAC_DEFAULT_R0

    def __post_init__(self):
        if self.focal <= 0:
            raise InputError("Principal distance must be positive")
        if self.pixel_pitch <= 0:
            raise InputError("Pixel pitch must be positive")
        if self.r0 < 0:
            raise InputError("Reference radius r0 cannot be negative")
        if self.sensor_width < 1 or self.sensor_height < 1:
            raise InputError("Sensor dimensions must be at least one pixel")

    @classmethod
    def from_dict(cls, data: dict) -> 'SmacCamera':
        missing = [k for k in ('focal', 'pixel_pitch', 'sensor_width', 'sensor_height') if k not in data]
        if missing:
            raise InputError(f"Camera model is missing keys: {missing}")
        unknown = [k for k in data if k not in CAMERA_KEYS]
        if unknown:
            raise InputError(f"Camera model has unknown keys: {unknown}")
        values = {k: float(v) for k, v in data.items()}
        values['sensor_width'] = int(values['sensor_width'])
        values['sensor_height'] = int(values['sensor_height'])
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def is_distortion_free(self) -> bool:
        return not any((self.k0, self.k1, self.k2, self.k3, self.p1, self.p2))


def load_camera(filename: str) -> SmacCamera:
    try:
        with open(filename, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise InputError(f"Camera file not found: {filename}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"Invalid JSON in camera file {filename}: {e}") from e
    camera = SmacCamera.from_dict(data)
    logger.info(f"Camera loaded from {filename}: focal={camera.focal} mm, "
                f"{camera.sensor_width}x{camera.sensor_height} px")
    return camera


def save_camera(camera: SmacCamera, filename: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
    with open(filename, 'w', encoding='utf-8') as f:
        json.dump(camera.to_dict(), f, indent=2)


def reduce_to_principal(x, y, cam: SmacCamera) -> Tuple[np.ndarray, np.ndarray]:
    return np.subtract(x, cam.xp), np.subtract(y, cam.yp)


def _radial_factor(xb, yb, cam: SmacCamera):
    r2 = np.square(xb) + np.square(yb)
    r02 = cam.r0 ** 2
    return (cam.k0
            + cam.k1 * (r2 - r02)
            + cam.k2 * (r2 ** 2 - r02 ** 2)
            + cam.k3 * (r2 ** 3 - r02 ** 3))


def radial_correction(xb, yb, cam: SmacCamera) -> Tuple[np.ndarray, np.ndarray]:
    """Radial term; r is measured from the principal point."""
    factor = _radial_factor(xb, yb, cam)
    return np.multiply(xb, factor), np.multiply(yb, factor)


def decentering_correction(xb, yb, cam: SmacCamera) -> Tuple[np.ndarray, np.ndarray]:
    xb = np.asarray(xb, dtype=np.float64)
    yb = np.asarray(yb, dtype=np.float64)
    r2 = xb ** 2 + yb ** 2
    dx = cam.p1 * (r2 + 2.0 * xb ** 2) + 2.0 * cam.p2 * xb * yb
    dy = 2.0 * cam.p1 * xb * yb + cam.p2 * (r2 + 2.0 * yb ** 2)
    return dx, dy


def _total_correction(xb, yb, cam: SmacCamera):
    rx, ry = radial_correction(xb, yb, cam)
    dx, dy = decentering_correction(xb, yb, cam)
    return rx + dx, ry + dy


def correct_point(x, y, cam: SmacCamera) -> Tuple[np.ndarray, np.ndarray]:
    """Measured image coordinates to corrected, principal-point-reduced coordinates."""
    xb, yb = reduce_to_principal(x, y, cam)
    dx, dy = _total_correction(xb, yb, cam)
    return xb + dx, yb + dy


def invert_correction(xc, yc, cam: SmacCamera, tol: float = SMAC_INVERSION_TOL,
                      max_iter: int = SMAC_INVERSION_MAX_ITER,
                      relaxation: float = SMAC_INVERSION_RELAXATION) -> Tuple[np.ndarray, np.ndarray]:
    """Measured coordinates whose correction lands on (xc, yc).

    Relaxed fixed-point iteration ``xb <- xb + w * (xc - delta(xb) - xb)``; works
    on scalars or arrays. The default ``w = 1`` is the plain step, which converges
    while the slope of the correction stays below one over the frame (about
    ``3 * k1 * r**2`` for a dominant k1). Stronger distortion oscillates at w = 1
    and needs a smaller ``w``; a step that never settles raises ConvergenceError.
    """
    if tol <= 0:
        raise InputError("Inversion tolerance must be positive")
    if not 0.0 < relaxation <= 1.0:
        raise InputError(f"Relaxation must lie in (0, 1], got {relaxation}")
    if max_iter < 1:
        raise InputError("max_iter must be at least 1")
    xc = np.asarray(xc, dtype=np.float64)
    yc = np.asarray(yc, dtype=np.float64)
    xb, yb = xc.copy(), yc.copy()
    with np.errstate(over='ignore', invalid='ignore'):
        for iteration in range(max_iter + 1):
            dx, dy = _total_correction(xb, yb, cam)
            res_x = xb + dx - xc
            res_y = yb + dy - yc
            residual = np.hypot(res_x, res_y)
            if not np.all(np.isfinite(residual)):
                break
            if residual.size == 0 or np.max(residual) < tol:
                logger.debug(f"SMAC inversion converged after {iteration} iterations")
                return xb + cam.xp, yb + cam.yp
            if iteration == max_iter:
                break
            xb = xb + relaxation * (xc - dx - xb)
            yb = yb + relaxation * (yc - dy - yb)
    raise ConvergenceError(
        f"SMAC inversion did not converge within {max_iter} iterations; "
        f"coefficients are outside the invertible range for these radii")


def pixel_to_mm(cols, rows, cam: SmacCamera) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel centres to image-plane mm (origin at the image centre, +y up)."""
    cx = (cam.sensor_width - 1) / 2.0
    cy = (cam.sensor_height - 1) / 2.0
    x = (np.asarray(cols, dtype=np.float64) - cx) * cam.pixel_pitch
    y = (cy - np.asarray(rows, dtype=np.float64)) * cam.pixel_pitch
    return x, y


def mm_to_pixel(x, y, cam: SmacCamera) -> Tuple[np.ndarray, np.ndarray]:
    cx = (cam.sensor_width - 1) / 2.0
    cy = (cam.sensor_height - 1) / 2.0
    cols = np.asarray(x, dtype=np.float64) / cam.pixel_pitch + cx
    rows = cy - np.asarray(y, dtype=np.float64) / cam.pixel_pitch
    return cols, rows


def undistort_image(img: RasterImage, cam: SmacCamera, tol: float = SMAC_INVERSION_TOL,
                    max_iter: int = SMAC_INVERSION_MAX_ITER, threads: int = 1) -> RasterImage:
    """Resample a perspective image into its distortion-free geometry.

    Each output pixel takes the bilinear sample at the measured position whose
    correction lands on it; sources outside the frame are black.
    """
    if (img.width, img.height) != (cam.sensor_width, cam.sensor_height):
        raise InputError(
            f"Image is {img.width}x{img.height} but camera sensor is "
            f"{cam.sensor_width}x{cam.sensor_height}")
    if cam.is_distortion_free and cam.xp == 0 and cam.yp == 0:
        return RasterImage.from_array(img.samples)

    cols = np.arange(img.width, dtype=np.float64)

    def undistort_rows(row_start: int, row_stop: int) -> np.ndarray:
        rows = np.arange(row_start, row_stop, dtype=np.float64)
        grid_cols, grid_rows = np.meshgrid(cols, rows)
        u, v = pixel_to_mm(grid_cols, grid_rows, cam)
        x, y = invert_correction(u - cam.xp, v - cam.yp, cam, tol=tol, max_iter=max_iter)
        src_cols, src_rows = mm_to_pixel(x, y, cam)
        return bilinear_sample(img.samples, src_rows, src_cols)

    out = process_row_blocks(img.height, undistort_rows, threads)
    logger.info(f"Undistorted {img.width}x{img.height} image")
    return RasterImage.from_array(out)

"""Stereo relative orientation, absolute orientation, DEM interpolation and
orthophoto mosaicking.

Conventions: rotations are stored world->camera, the camera looks down the -Z
axis of its own frame, and mapping-frame coordinates are metres.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import spatial

from core.exceptions import DegenerateGeometryError, InputError
from core.lens_distortion import SmacCamera, invert_correction, mm_to_pixel, pixel_to_mm, correct_point
from core.raster import RasterImage, bilinear_sample, process_row_blocks
from inputs.constants import DEGENERATE_EPS, IDW_NEIGHBOURS, IDW_POWER, ROTATION_ORTHONORMAL_TOL

logger = logging.getLogger(__name__)


def _check_rotation(rotation: np.ndarray, name: str) -> None:
    if rotation.shape != (3, 3):
        raise InputError(f"{name} must be a 3x3 matrix")
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=ROTATION_ORTHONORMAL_TOL):
        raise InputError(f"{name} is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > ROTATION_ORTHONORMAL_TOL:
        raise InputError(f"{name} must have determinant +1")


@dataclass(frozen=True)
class ExteriorOrientation:
    position: np.ndarray
    rotation: np.ndarray
    image: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'position', np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, 'rotation', np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        _check_rotation(self.rotation, 'EOP rotation')


@dataclass(frozen=True)
class Correspondence2D:
    a: Tuple[float, float]
    b: Tuple[float, float]

    def __post_init__(self):
        if not np.all(np.isfinite(list(self.a) + list(self.b))):
            raise InputError("Correspondence coordinates must be finite")


@dataclass(frozen=True)
class Similarity2D:
    """p -> scale * R(kappa) * p + t in image pixels."""
    scale: float
    kappa: float
    t: Tuple[float, float]

    def __post_init__(self):
        if not self.scale > 0:
            raise InputError("Similarity scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        c, s = math.cos(self.kappa), math.sin(self.kappa)
        rotation = np.array([[c, -s], [s, c]])
        return self.scale * points @ rotation.T + np.asarray(self.t)


@dataclass(frozen=True)
class Similarity3D:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise InputError("Similarity scale must be positive")
        _check_rotation(np.asarray(self.rotation), 'Similarity rotation')

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.scale * points @ np.asarray(self.rotation).T + np.asarray(self.translation)


@dataclass(frozen=True)
class PointCloud3D:
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'points', np.asarray(self.points, dtype=np.float64).reshape(-1, 3))


@dataclass(frozen=True)
class DemGrid:
    """Elevation raster; origin is the centre of cell (0, 0) and rows grow with Y."""
    origin: Tuple[float, float]
    cell: float
    nx: int
    ny: int
    z: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.cell <= 0:
            raise InputError("DEM cell size must be positive")
        if self.z.shape != (self.ny, self.nx):
            raise InputError(f"DEM array shape {self.z.shape} does not match {self.ny}x{self.nx}")
        if not np.all(np.isfinite(self.z)):
            raise InputError("DEM contains non-finite elevations")

    @property
    def extent(self) -> Tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) of the cell footprints."""
        half = self.cell / 2.0
        return (self.origin[0] - half, self.origin[1] - half,
                self.origin[0] + (self.nx - 1) * self.cell + half,
                self.origin[1] + (self.ny - 1) * self.cell + half)

    def elevation_at(self, x, y) -> np.ndarray:
        """Bilinear elevation, clamped to the outermost cell centres."""
        fx = np.clip((np.asarray(x, dtype=np.float64) - self.origin[0]) / self.cell, 0, self.nx - 1)
        fy = np.clip((np.asarray(y, dtype=np.float64) - self.origin[1]) / self.cell, 0, self.ny - 1)
        x0 = np.floor(fx).astype(np.intp)
        y0 = np.floor(fy).astype(np.intp)
        x1 = np.minimum(x0 + 1, self.nx - 1)
        y1 = np.minimum(y0 + 1, self.ny - 1)
        wx = fx - x0
        wy = fy - y0
        z = self.z
        return ((z[y0, x0] * (1 - wx) + z[y0, x1] * wx) * (1 - wy)
                + (z[y1, x0] * (1 - wx) + z[y1, x1] * wx) * wy)


# ----------------------------------------------------------------------------
# Relative orientation
# ----------------------------------------------------------------------------

def estimate_rop_two_point(c1: Correspondence2D, c2: Correspondence2D) -> Similarity2D:
    """Exact similarity from a minimal sample of two correspondences."""
    za, zb = complex(*c1.a), complex(*c2.a)
    wa, wb = complex(*c1.b), complex(*c2.b)
    if abs(zb - za) < DEGENERATE_EPS or abs(wb - wa) < DEGENERATE_EPS:
        raise DegenerateGeometryError("Two-point sample has coincident points")
    m = (wb - wa) / (zb - za)
    t = wa - m * za
    return Similarity2D(scale=abs(m), kappa=math.atan2(m.imag, m.real), t=(t.real, t.imag))


def fit_similarity_2d(a: np.ndarray, b: np.ndarray) -> Similarity2D:
    """Least-squares similarity mapping points ``a`` onto ``b``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) < 2:
        raise DegenerateGeometryError("At least two correspondences are required")
    za = a[:, 0] + 1j * a[:, 1]
    zb = b[:, 0] + 1j * b[:, 1]
    ma, mb = za.mean(), zb.mean()
    da, db = za - ma, zb - mb
    denom = np.sum(np.abs(da) ** 2)
    if denom < DEGENERATE_EPS:
        raise DegenerateGeometryError("Correspondences collapse to a single point")
    m = np.sum(np.conj(da) * db) / denom
    if abs(m) < DEGENERATE_EPS:
        raise DegenerateGeometryError("Target points collapse to a single point")
    t = mb - m * ma
    return Similarity2D(scale=float(abs(m)), kappa=float(np.angle(m)), t=(float(t.real), float(t.imag)))


def _reprojection_residuals(model: Similarity2D, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(model.apply(a) - b, axis=1)


def ransac_rop(matches: Sequence[Correspondence2D], threshold: float, iterations: int,
               seed: int) -> Tuple[Similarity2D, np.ndarray]:
    """Robust similarity between two nadir images scored by reprojection distance.

    Every iteration draws its sample from its own generator seeded with
    (seed, iteration), so the result does not depend on evaluation order.
    """
    if len(matches) < 2:
        raise InputError("RANSAC needs at least two correspondences")
    if threshold <= 0:
        raise InputError("RANSAC threshold must be positive")
    a = np.array([m.a for m in matches], dtype=np.float64)
    b = np.array([m.b for m in matches], dtype=np.float64)
    n = len(matches)

    best_inliers = np.zeros(n, dtype=bool)
    best_count = 0
    trials = 1 if n == 2 else max(1, int(iterations))
    for iteration in range(trials):
        if n == 2:
            i, j = 0, 1
        else:
            rng = np.random.default_rng([seed, iteration])
            i, j = rng.choice(n, size=2, replace=False)
        try:
            model = estimate_rop_two_point(matches[i], matches[j])
        except (DegenerateGeometryError, InputError):
            continue
        inliers = _reprojection_residuals(model, a, b) <= threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_count < 2:
        raise DegenerateGeometryError("No model is supported by at least two inliers")

    # refit on the consensus set until it stops changing
    inliers = best_inliers
    model = fit_similarity_2d(a[inliers], b[inliers])
    for _ in range(10):
        updated = _reprojection_residuals(model, a, b) <= threshold
        if updated.sum() < 2 or np.array_equal(updated, inliers):
            break
        inliers = updated
        model = fit_similarity_2d(a[inliers], b[inliers])
    inliers = _reprojection_residuals(model, a, b) <= threshold

    logger.info(f"RANSAC ROP: {int(inliers.sum())}/{n} inliers, scale={model.scale:.6f}, "
                f"kappa={model.kappa:.6f} rad")
    return model, np.flatnonzero(inliers)


# ----------------------------------------------------------------------------
# Absolute orientation
# ----------------------------------------------------------------------------

def absolute_orientation(local: Sequence[Sequence[float]],
                         mapping: Sequence[Sequence[float]]) -> Similarity3D:
    """Closed-form 7-parameter similarity (SVD of the cross-covariance)."""
    x = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(mapping, dtype=np.float64).reshape(-1, 3)
    if len(x) != len(y):
        raise InputError("Local and mapping point lists differ in length")
    if len(x) < 3:
        raise InputError("Absolute orientation needs at least three point pairs")

    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    xd, yd = x - mu_x, y - mu_y
    spread = np.linalg.svd(xd, compute_uv=False)
    if spread[0] < DEGENERATE_EPS or spread[1] < 1e-9 * spread[0]:
        raise DegenerateGeometryError("Control points are collinear; rotation is not unique")

    n = len(x)
    var_x = np.sum(xd ** 2) / n
    cov = yd.T @ xd / n
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s) / var_x)
    translation = mu_y - scale * rotation @ mu_x
    logger.info(f"Absolute orientation from {n} points: scale={scale:.6f}")
    return Similarity3D(scale=scale, rotation=rotation, translation=translation)


def checkpoint_rmse(transform: Similarity3D, local: Sequence[Sequence[float]],
                    mapping: Sequence[Sequence[float]]) -> Tuple[float, float, float]:
    """Per-axis RMSE of check points after applying the absolute orientation."""
    predicted = transform.apply(np.asarray(local, dtype=np.float64))
    residuals = predicted - np.asarray(mapping, dtype=np.float64).reshape(-1, 3)
    rmse = np.sqrt(np.mean(residuals ** 2, axis=0))
    return float(rmse[0]), float(rmse[1]), float(rmse[2])


# ----------------------------------------------------------------------------
# DEM
# ----------------------------------------------------------------------------

def interpolate_dem(cloud: PointCloud3D, origin: Tuple[float, float], cell: float,
                    nx: int, ny: int, k: int = IDW_NEIGHBOURS, power: float = IDW_POWER) -> DemGrid:
    """Inverse-distance-weighted elevation over the k nearest cloud points."""
    points = cloud.points
    if len(points) == 0:
        raise InputError("Cannot interpolate a DEM from an empty point cloud")
    if nx < 1 or ny < 1:
        raise InputError("DEM must have at least one cell in each direction")
    if cell <= 0:
        raise InputError("DEM cell size must be positive")

    gx = origin[0] + np.arange(nx) * cell
    gy = origin[1] + np.arange(ny) * cell
    qx, qy = np.meshgrid(gx, gy)
    queries = np.column_stack([qx.ravel(), qy.ravel()])

    k = min(k, len(points))
    tree = spatial.cKDTree(points[:, :2])
    dist, idx = tree.query(queries, k=k)
    dist = np.asarray(dist, dtype=np.float64).reshape(len(queries), k)
    idx = np.asarray(idx).reshape(len(queries), k)

    z_near = points[idx, 2]
    exact = dist[:, 0] < DEGENERATE_EPS
    with np.errstate(divide='ignore'):
        weights = 1.0 / np.where(exact[:, np.newaxis], 1.0, dist) ** power
    z = np.sum(weights * z_near, axis=1) / np.sum(weights, axis=1)
    z = np.where(exact, z_near[:, 0], z)
    logger.info(f"DEM {nx}x{ny} interpolated from {len(points)} points (k={k})")
    return DemGrid(origin=(float(origin[0]), float(origin[1])), cell=float(cell),
                   nx=int(nx), ny=int(ny), z=z.reshape(ny, nx))


# ----------------------------------------------------------------------------
# Collinearity projection and orthorectification
# ----------------------------------------------------------------------------

def _camera_frame(ground: np.ndarray, eo: ExteriorOrientation) -> np.ndarray:
    return (np.asarray(ground, dtype=np.float64).reshape(-1, 3) - eo.position) @ eo.rotation.T


def _project_points(ground: np.ndarray, eo: ExteriorOrientation, cam: SmacCamera,
                    margin: float = 0.5) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project many ground points; returns cols, rows and a validity mask.

    Points behind the camera or whose ideal image position lies beyond the
    sensor (plus ``margin`` of its half-size) are marked invalid and skipped
    by the distortion inversion.
    """
    p = _camera_frame(ground, eo)
    depth = -p[:, 2]
    valid = depth > DEGENERATE_EPS
    safe = np.where(valid, p[:, 2], -1.0)
    xc = -cam.focal * p[:, 0] / safe
    yc = -cam.focal * p[:, 1] / safe

    half_w = cam.sensor_width * cam.pixel_pitch / 2.0 * (1.0 + margin)
    half_h = cam.sensor_height * cam.pixel_pitch / 2.0 * (1.0 + margin)
    valid &= (np.abs(xc) <= half_w) & (np.abs(yc) <= half_h)

    cols = np.full(len(p), np.nan)
    rows = np.full(len(p), np.nan)
    if np.any(valid):
        x, y = invert_correction(xc[valid], yc[valid], cam)
        cols[valid], rows[valid] = mm_to_pixel(x, y, cam)
    return cols, rows, valid


def project_ground_to_image(ground: Sequence[float], eo: ExteriorOrientation,
                            cam: SmacCamera) -> Tuple[float, float]:
    """Collinearity projection of one ground point to (x=col, y=row) pixels."""
    p = _camera_frame(np.asarray(ground, dtype=np.float64), eo)[0]
    if -p[2] <= DEGENERATE_EPS:
        raise DegenerateGeometryError("Ground point is at or behind the projection centre")
    xc = -cam.focal * p[0] / p[2]
    yc = -cam.focal * p[1] / p[2]
    x, y = invert_correction(xc, yc, cam)
    col, row = mm_to_pixel(x, y, cam)
    return float(col), float(row)


def backproject_to_plane(col: float, row: float, eo: ExteriorOrientation, cam: SmacCamera,
                         plane_z: float) -> np.ndarray:
    """Intersect the ray through an image pixel with the plane Z = plane_z."""
    x, y = pixel_to_mm(col, row, cam)
    xc, yc = correct_point(x, y, cam)
    ray_cam = np.array([float(xc), float(yc), -cam.focal])
    ray_world = eo.rotation.T @ ray_cam
    if abs(ray_world[2]) < DEGENERATE_EPS:
        raise DegenerateGeometryError("Image ray is parallel to the ground plane")
    t = (plane_z - eo.position[2]) / ray_world[2]
    if t <= 0:
        raise DegenerateGeometryError("Ground plane lies behind the camera")
    return eo.position + t * ray_world


def ortho_ground_grid(extent: Tuple[float, float, float, float],
                      gsd: float) -> Tuple[np.ndarray, np.ndarray]:
    """Ground X/Y of mosaic cell centres, north up."""
    x_min, y_min, x_max, y_max = extent
    width = max(1, int(math.ceil((x_max - x_min) / gsd - 1e-9)))
    height = max(1, int(math.ceil((y_max - y_min) / gsd - 1e-9)))
    xs = x_min + (np.arange(width) + 0.5) * gsd
    ys = y_max - (np.arange(height) + 0.5) * gsd
    return np.meshgrid(xs, ys)


def orthorectify(images: Sequence[Tuple[RasterImage, ExteriorOrientation]], cam: SmacCamera,
                 dem: DemGrid, gsd: float,
                 extent: Optional[Tuple[float, float, float, float]] = None,
                 threads: int = 1) -> RasterImage:
    """Nearest-camera orthomosaic over the DEM (or an explicit ground extent)."""
    if not images:
        raise InputError("Orthorectification needs at least one image")
    if gsd <= 0:
        raise InputError("GSD must be positive")
    channels = {img.channels for img, _ in images}
    if len(channels) != 1:
        raise InputError("All source images must have the same channel count")
    for img, _ in images:
        if (img.width, img.height) != (cam.sensor_width, cam.sensor_height):
            raise InputError("Source image size does not match the camera sensor")
    n_channels = channels.pop()
    dtypes = {img.samples.dtype for img, _ in images}
    if len(dtypes) != 1:
        raise InputError("All source images must have the same bit depth")
    dtype = dtypes.pop()

    grid_x, grid_y = ortho_ground_grid(extent or dem.extent, gsd)
    height, width = grid_x.shape

    def mosaic_rows(row_start: int, row_stop: int) -> np.ndarray:
        gx = grid_x[row_start:row_stop].ravel()
        gy = grid_y[row_start:row_stop].ravel()
        gz = dem.elevation_at(gx, gy)
        ground = np.column_stack([gx, gy, gz])
        out = np.zeros((len(ground), n_channels), dtype=dtype)
        best = np.full(len(ground), np.inf)
        for img, eo in images:
            cols, rows, valid = _project_points(ground, eo, cam)
            inside = valid & (cols >= -1e-6) & (cols <= img.width - 1 + 1e-6) \
                & (rows >= -1e-6) & (rows <= img.height - 1 + 1e-6)
            dist = np.linalg.norm(ground - eo.position, axis=1)
            take = inside & (dist < best)
            if np.any(take):
                out[take] = bilinear_sample(img.samples, rows[take], cols[take])
                best[take] = dist[take]
        return out.reshape(row_stop - row_start, width, n_channels)

    mosaic = process_row_blocks(height, mosaic_rows, threads)
    logger.info(f"Orthomosaic {width}x{height} at {gsd} m/pixel from {len(images)} images")
    return RasterImage.from_array(mosaic)


# ----------------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------------

def _read_csv(filename: str, columns: Sequence[str], what: str) -> pd.DataFrame:
    if not os.path.exists(filename):
        raise InputError(f"{what} file not found: {filename}")
    try:
        frame = pd.read_csv(filename)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"Cannot parse {what} file {filename}: {e}") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InputError(f"{what} file {filename} is missing columns {missing}")
    values = frame[list(columns)]
    if not np.all(np.isfinite(values.to_numpy(dtype=np.float64))):
        raise InputError(f"{what} file {filename} contains non-numeric values")
    return values


def read_correspondences(filename: str) -> List[Correspondence2D]:
    frame = _read_csv(filename, ('x1', 'y1', 'x2', 'y2'), 'Correspondence')
    return [Correspondence2D(a=(r.x1, r.y1), b=(r.x2, r.y2)) for r in frame.itertuples(index=False)]


def read_gcps(filename: str) -> Tuple[np.ndarray, np.ndarray]:
    frame = _read_csv(filename, ('Xlocal', 'Ylocal', 'Zlocal', 'Xmap', 'Ymap', 'Zmap'), 'GCP')
    data = frame.to_numpy(dtype=np.float64)
    return data[:, :3], data[:, 3:]


def read_point_cloud(filename: str) -> PointCloud3D:
    frame = _read_csv(filename, ('X', 'Y', 'Z'), 'Point cloud')
    return PointCloud3D(points=frame.to_numpy(dtype=np.float64))


def read_eops(filename: str) -> List[ExteriorOrientation]:
    try:
        with open(filename, 'r', encoding='utf-8') as f:
            entries = json.load(f)
    except FileNotFoundError as e:
        raise InputError(f"EOP file not found: {filename}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"Invalid JSON in EOP file {filename}: {e}") from e
    if not isinstance(entries, list):
        raise InputError("EOP file must contain a JSON array")
    eops = []
    for entry in entries:
        try:
            eops.append(ExteriorOrientation(position=entry['position'],
                                            rotation=np.reshape(entry['rotation'], (3, 3)),
                                            image=entry['image']))
        except (KeyError, ValueError, TypeError) as e:
            if isinstance(e, InputError):
                raise
            raise InputError(f"Malformed EOP entry {entry}: {e}") from e
    return eops


def write_dem(dem: DemGrid, filename: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
    with open(filename, 'w', encoding='utf-8', newline='') as f:
        f.write(f"origin_x,{dem.origin[0]!r}\n")
        f.write(f"origin_y,{dem.origin[1]!r}\n")
        f.write(f"cell,{dem.cell!r}\n")
        f.write(f"nx,{dem.nx}\n")
        pd.DataFrame(dem.z).to_csv(f, header=False, index=False, float_format='%.6f')


def read_dem(filename: str) -> DemGrid:
    if not os.path.exists(filename):
        raise InputError(f"DEM file not found: {filename}")
    try:
        with open(filename, 'r', encoding='utf-8') as f:
            header = [f.readline().strip().split(',') for _ in range(4)]
        keys = [h[0] for h in header]
        if keys != ['origin_x', 'origin_y', 'cell', 'nx']:
            raise InputError(f"DEM header must be origin_x, origin_y, cell, nx; got {keys}")
        origin = (float(header[0][1]), float(header[1][1]))
        cell = float(header[2][1])
        nx = int(header[3][1])
        z = pd.read_csv(filename, skiprows=4, header=None).to_numpy(dtype=np.float64)
    except (IndexError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        if isinstance(e, InputError):
            raise
        raise InputError(f"Cannot parse DEM file {filename}: {e}") from e
    if z.shape[1] != nx:
        raise InputError(f"DEM rows have {z.shape[1]} values, header says {nx}")
    return DemGrid(origin=origin, cell=cell, nx=nx, ny=z.shape[0], z=z)

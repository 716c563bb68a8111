import json
import math
import time

import numpy as np
import pytest

from core.exceptions import DegenerateGeometryError, InputError
from core.lens_distortion import SmacCamera
from core.ortho_geometry import (Correspondence2D, DemGrid, ExteriorOrientation, PointCloud3D, Similarity2D,
                                 absolute_orientation, backproject_to_plane, checkpoint_rmse,
                                 estimate_rop_two_point, fit_similarity_2d, interpolate_dem, orthorectify,
                                 project_ground_to_image, ransac_rop, read_correspondences, read_dem, read_eops,
                                 read_gcps, write_dem)
from core.raster import RasterImage


def rz(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def nadir(x=0.0, y=0.0, z=10.0, image=''):
    return ExteriorOrientation(position=(x, y, z), rotation=np.eye(3), image=image)


def flat_dem(z=0.0):
    return DemGrid(origin=(0.0, 0.0), cell=1.0, nx=1, ny=1, z=np.full((1, 1), z))


@pytest.mark.parametrize("pairs, scale, kappa, t", [
    ((((0, 0), (0, 0)), ((1, 0), (1, 0))), 1.0, 0.0, (0.0, 0.0)),
    ((((0, 0), (1, 1)), ((1, 0), (1, 3))), 2.0, math.pi / 2, (1.0, 1.0)),
    ((((0, 0), (5, 0)), ((2, 0), (5, 2))), 1.0, math.pi / 2, (5.0, 0.0)),
])
def test_two_point_rop(pairs, scale, kappa, t):
    model = estimate_rop_two_point(*(Correspondence2D(a=a, b=b) for a, b in pairs))
    assert model.scale == pytest.approx(scale, abs=1e-12)
    assert model.kappa == pytest.approx(kappa, abs=1e-12)
    assert model.t == pytest.approx(t, abs=1e-12)


def test_two_point_rop_recovers_generating_similarity():
    truth = Similarity2D(scale=0.97, kappa=-0.4, t=(12.5, -3.25))
    a = np.array([[10.0, 20.0], [-35.0, 4.0]])
    b = truth.apply(a)
    model = estimate_rop_two_point(Correspondence2D(a=tuple(a[0]), b=tuple(b[0])),
                                   Correspondence2D(a=tuple(a[1]), b=tuple(b[1])))
    assert model.scale == pytest.approx(truth.scale, abs=1e-12)
    assert model.kappa == pytest.approx(truth.kappa, abs=1e-12)
    assert model.t == pytest.approx(truth.t, abs=1e-12)


def test_two_point_rop_coincident_points():
    with pytest.raises(DegenerateGeometryError):
        estimate_rop_two_point(Correspondence2D(a=(1, 1), b=(0, 0)), Correspondence2D(a=(1, 1), b=(2, 2)))


def test_correspondence_must_be_finite():
    with pytest.raises(InputError):
        Correspondence2D(a=(np.nan, 0.0), b=(0.0, 0.0))


def _matches(a, b):
    return [Correspondence2D(a=tuple(p), b=tuple(q)) for p, q in zip(a, b)]


def test_ransac_exact_inliers():
    truth = Similarity2D(scale=1.1, kappa=0.3, t=(4.0, -2.0))
    a = np.random.default_rng(0).uniform(0, 500, size=(10, 2))
    model, inliers = ransac_rop(_matches(a, truth.apply(a)), threshold=1.0, iterations=50, seed=1)
    assert list(inliers) == list(range(10))
    assert model.scale == pytest.approx(1.1, abs=1e-9)
    assert model.kappa == pytest.approx(0.3, abs=1e-9)


def test_ransac_rejects_planted_outliers():
    rng = np.random.default_rng(11)
    truth = Similarity2D(scale=1.02, kappa=0.1, t=(5.0, -3.0))
    a = rng.uniform(0, 1000, size=(100, 2))
    b = truth.apply(a)
    b[:70] += rng.normal(0, 0.05, size=(70, 2))
    b[70:] = rng.uniform(0, 1000, size=(30, 2))
    assert np.all(np.linalg.norm(b[70:] - truth.apply(a[70:]), axis=1) > 1.0)
    matches = _matches(a, b)

    start = time.perf_counter()
    model, inliers = ransac_rop(matches, threshold=1.0, iterations=500, seed=42)
    assert time.perf_counter() - start < 0.5
    assert set(inliers.tolist()) == set(range(70))
    assert model.scale == pytest.approx(1.02, abs=1e-3)
    assert model.kappa == pytest.approx(0.1, abs=1e-3)
    np.testing.assert_allclose(model.t, (5.0, -3.0), atol=0.1)
    residuals = np.linalg.norm(model.apply(a[inliers]) - b[inliers], axis=1)
    assert np.all(residuals <= 1.0)

    again, inliers_again = ransac_rop(matches, threshold=1.0, iterations=500, seed=42)
    assert again == model
    np.testing.assert_array_equal(inliers_again, inliers)


def test_ransac_two_matches_is_exact():
    matches = [Correspondence2D(a=(0, 0), b=(1, 1)), Correspondence2D(a=(1, 0), b=(1, 3))]
    model, inliers = ransac_rop(matches, threshold=0.5, iterations=100, seed=0)
    assert list(inliers) == [0, 1]
    assert model.scale == pytest.approx(2.0)


def test_ransac_input_errors():
    with pytest.raises(InputError):
        ransac_rop([Correspondence2D(a=(0, 0), b=(0, 0))], threshold=1.0, iterations=10, seed=0)
    with pytest.raises(InputError):
        ransac_rop(_matches(np.eye(2), np.eye(2)), threshold=0.0, iterations=10, seed=0)


def test_least_squares_similarity_needs_spread():
    with pytest.raises(DegenerateGeometryError):
        fit_similarity_2d(np.ones((3, 2)), np.zeros((3, 2)))


LOCAL = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.2, 1.0]])


def test_absolute_orientation_identity():
    transform = absolute_orientation(LOCAL, LOCAL)
    assert transform.scale == pytest.approx(1.0)
    np.testing.assert_allclose(transform.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(transform.translation, 0.0, atol=1e-12)


def test_absolute_orientation_translation():
    transform = absolute_orientation(LOCAL, LOCAL + (10.0, 0.0, 0.0))
    assert transform.scale == pytest.approx(1.0)
    np.testing.assert_allclose(transform.translation, [10.0, 0.0, 0.0], atol=1e-12)


def test_absolute_orientation_scaled_rotation():
    local = np.random.default_rng(2).uniform(-5, 5, size=(4, 3))
    mapping = 2.0 * local @ rz(math.pi / 2).T + (1.0, 2.0, 3.0)
    transform = absolute_orientation(local, mapping)
    assert transform.scale == pytest.approx(2.0, abs=1e-9)
    np.testing.assert_allclose(transform.rotation, rz(math.pi / 2), atol=1e-9)
    np.testing.assert_allclose(transform.translation, [1.0, 2.0, 3.0], atol=1e-9)
    assert max(checkpoint_rmse(transform, local, mapping)) < 1e-9


def test_absolute_orientation_residual_unchanged_by_common_rigid_motion():
    rng = np.random.default_rng(8)
    local = rng.uniform(-5, 5, size=(6, 3))
    mapping = 1.5 * local @ rz(0.3).T + (2.0, -1.0, 0.5) + rng.normal(0, 0.05, size=(6, 3))
    base = checkpoint_rmse(absolute_orientation(local, mapping), local, mapping)
    motion, shift = rz(1.1), np.array([100.0, 50.0, -7.0])
    moved_local = local @ motion.T + shift
    moved_mapping = mapping @ motion.T + shift
    moved = absolute_orientation(moved_local, moved_mapping)
    residual = np.sqrt(np.sum(np.square(base)))
    moved_residual = np.sqrt(np.sum(np.square(checkpoint_rmse(moved, moved_local, moved_mapping))))
    assert moved_residual == pytest.approx(residual, rel=1e-6)


def test_absolute_orientation_errors():
    with pytest.raises(InputError):
        absolute_orientation(LOCAL[:2], LOCAL[:2])
    with pytest.raises(InputError):
        absolute_orientation(LOCAL, LOCAL[:3])
    line = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [5.0, 5.0, 5.0]])
    with pytest.raises(DegenerateGeometryError):
        absolute_orientation(line, line * 2)


def test_idw_constant_field():
    cloud = PointCloud3D(points=np.column_stack([np.random.default_rng(1).uniform(0, 10, size=(20, 2)),
                                                 np.full(20, 5.0)]))
    dem = interpolate_dem(cloud, origin=(0.0, 0.0), cell=1.0, nx=11, ny=11)
    np.testing.assert_allclose(dem.z, 5.0)


def test_idw_single_point():
    dem = interpolate_dem(PointCloud3D(points=[[2.0, 2.0, 3.0]]), origin=(0.0, 0.0), cell=0.5, nx=4, ny=3)
    np.testing.assert_allclose(dem.z, 3.0)
    assert dem.z.shape == (3, 4)


def test_idw_symmetric_midpoint_and_exact_hit():
    cloud = PointCloud3D(points=[[0.0, 0.0, 0.0], [10.0, 0.0, 10.0]])
    dem = interpolate_dem(cloud, origin=(0.0, 0.0), cell=5.0, nx=3, ny=1)
    np.testing.assert_allclose(dem.z[0], [0.0, 5.0, 10.0])


def test_idw_stays_within_contributing_range():
    rng = np.random.default_rng(4)
    points = np.column_stack([rng.uniform(0, 20, size=(50, 2)), rng.uniform(-2, 7, size=50)])
    dem = interpolate_dem(PointCloud3D(points=points), origin=(0.0, 0.0), cell=0.7, nx=30, ny=30)
    assert dem.z.min() >= points[:, 2].min() - 1e-12
    assert dem.z.max() <= points[:, 2].max() + 1e-12


def test_idw_empty_cloud():
    with pytest.raises(InputError):
        interpolate_dem(PointCloud3D(points=np.zeros((0, 3))), origin=(0.0, 0.0), cell=1.0, nx=2, ny=2)


def test_dem_elevation_is_bilinear_and_clamped():
    dem = DemGrid(origin=(0.0, 0.0), cell=2.0, nx=2, ny=2, z=np.array([[0.0, 2.0], [4.0, 6.0]]))
    assert float(dem.elevation_at(1.0, 1.0)) == pytest.approx(3.0)
    assert float(dem.elevation_at(-10.0, 100.0)) == pytest.approx(4.0)
    assert dem.extent == (-1.0, -1.0, 3.0, 3.0)


def test_projection_on_axis_hits_principal_point(pinhole_camera):
    col, row = project_ground_to_image((0.0, 0.0, 0.0), nadir(z=20.0), pinhole_camera)
    assert (col, row) == pytest.approx((31.5, 23.5))


def test_projection_similar_triangles():
    cam = SmacCamera(focal=3.0, pixel_pitch=0.01, sensor_width=64, sensor_height=48)
    col, row = project_ground_to_image((2.0, 0.0, 0.0), nadir(z=20.0), cam)
    # 0.3 mm to the right of the principal point is 30 pixels
    assert col == pytest.approx(31.5 + 30.0)
    assert row == pytest.approx(23.5)


def test_projection_at_camera_height_fails(pinhole_camera):
    with pytest.raises(DegenerateGeometryError):
        project_ground_to_image((1.0, 0.0, 10.0), nadir(z=10.0), pinhole_camera)


def test_projection_then_ray_cast_returns_ground(pinhole_camera):
    eo = ExteriorOrientation(position=(1.0, -2.0, 15.0), rotation=rz(0.4), image='a.png')
    ground = np.array([1.3, -1.8, 0.25])
    col, row = project_ground_to_image(ground, eo, pinhole_camera)
    np.testing.assert_allclose(backproject_to_plane(col, row, eo, pinhole_camera, 0.25), ground, atol=1e-9)


def test_rotation_must_be_proper():
    with pytest.raises(InputError):
        ExteriorOrientation(position=(0, 0, 0), rotation=np.diag([1.0, 1.0, -1.0]))


def test_orthorectify_matches_pinhole_footprint(pinhole_camera):
    # at 10 m a 0.01 mm pixel behind a 4 mm lens covers 0.025 m of ground
    rng = np.random.default_rng(6)
    samples = rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)
    mosaic = orthorectify([(RasterImage.from_array(samples), nadir(z=10.0))], pinhole_camera, flat_dem(),
                          gsd=0.025, extent=(-0.8, -0.6, 0.8, 0.6))
    assert (mosaic.width, mosaic.height) == (64, 48)
    diff = np.abs(mosaic.samples.astype(int) - samples.astype(int))
    assert diff.max() <= 2


def test_orthorectify_takes_nearest_camera(pinhole_camera):
    left = RasterImage.from_array(np.full((48, 64), 50, dtype=np.uint8))
    right = RasterImage.from_array(np.full((48, 64), 200, dtype=np.uint8))
    mosaic = orthorectify([(left, nadir(x=-0.2)), (right, nadir(x=0.2))], pinhole_camera, flat_dem(),
                          gsd=0.05, extent=(-0.5, -0.3, 0.5, 0.3))
    plane = mosaic.plane()
    assert np.all(plane[:, :10] == 50)
    assert np.all(plane[:, 10:] == 200)


def test_orthorectify_uncovered_cells_are_black(pinhole_camera):
    img = RasterImage.from_array(np.full((48, 64), 99, dtype=np.uint8))
    mosaic = orthorectify([(img, nadir())], pinhole_camera, flat_dem(), gsd=0.1, extent=(-2.0, -0.2, 2.0, 0.2))
    row = mosaic.plane()[0]
    assert row[0] == 0 and row[-1] == 0
    assert row[20] == 99


def test_orthorectify_keeps_16_bit_samples(pinhole_camera):
    img = RasterImage.from_array(np.full((48, 64), 4000, dtype=np.uint16))
    mosaic = orthorectify([(img, nadir())], pinhole_camera, flat_dem(), gsd=0.1, extent=(-2.0, -0.2, 2.0, 0.2))
    assert mosaic.samples.dtype == np.uint16
    assert mosaic.bit_depth == 16
    assert mosaic.plane()[0][20] == 4000
    with pytest.raises(InputError):
        orthorectify([(img, nadir()), (RasterImage.from_array(np.zeros((48, 64), dtype=np.uint8)), nadir())],
                     pinhole_camera, flat_dem(), gsd=0.1)


def test_orthorectify_is_thread_independent(pinhole_camera):
    samples = np.random.default_rng(9).integers(0, 256, size=(48, 64), dtype=np.uint8)
    images = [(RasterImage.from_array(samples), nadir(x=0.1, y=-0.05))]
    one = orthorectify(images, pinhole_camera, flat_dem(), gsd=0.03, extent=(-0.6, -0.5, 0.7, 0.4))
    four = orthorectify(images, pinhole_camera, flat_dem(), gsd=0.03, extent=(-0.6, -0.5, 0.7, 0.4), threads=4)
    np.testing.assert_array_equal(one.samples, four.samples)


def test_orthorectify_input_errors(pinhole_camera):
    with pytest.raises(InputError):
        orthorectify([], pinhole_camera, flat_dem(), gsd=0.1)
    img = RasterImage.from_array(np.zeros((10, 10), dtype=np.uint8))
    with pytest.raises(InputError):
        orthorectify([(img, nadir())], pinhole_camera, flat_dem(), gsd=0.1)


def test_dem_file_preserves_grid(tmp_path):
    dem = DemGrid(origin=(10.5, -3.0), cell=0.25, nx=3, ny=2, z=np.array([[1.0, 2.5, 3.0], [-1.0, 0.0, 7.125]]))
    write_dem(dem, str(tmp_path / 'dem.csv'))
    loaded = read_dem(str(tmp_path / 'dem.csv'))
    assert (loaded.origin, loaded.cell, loaded.nx, loaded.ny) == (dem.origin, dem.cell, 3, 2)
    np.testing.assert_allclose(loaded.z, dem.z)


def test_read_input_files(tmp_path):
    (tmp_path / 'matches.csv').write_text("x1,y1,x2,y2\n0,0,1,1\n1,0,1,3\n")
    (tmp_path / 'gcps.csv').write_text("Xlocal,Ylocal,Zlocal,Xmap,Ymap,Zmap\n0,0,0,1,2,3\n1,0,0,2,2,3\n")
    (tmp_path / 'eops.json').write_text(json.dumps(
        [{'image': 'a.png', 'position': [0, 0, 10], 'rotation': [1, 0, 0, 0, 1, 0, 0, 0, 1]}]))
    matches = read_correspondences(str(tmp_path / 'matches.csv'))
    assert matches[1] == Correspondence2D(a=(1.0, 0.0), b=(1.0, 3.0))
    local, mapping = read_gcps(str(tmp_path / 'gcps.csv'))
    np.testing.assert_allclose(mapping[1], [2.0, 2.0, 3.0])
    assert read_eops(str(tmp_path / 'eops.json'))[0].image == 'a.png'


def test_read_input_file_errors(tmp_path):
    (tmp_path / 'bad.csv').write_text("x1,y1\n0,0\n")
    with pytest.raises(InputError):
        read_correspondences(str(tmp_path / 'bad.csv'))
    with pytest.raises(InputError):
        read_correspondences(str(tmp_path / 'missing.csv'))
    (tmp_path / 'eops.json').write_text(json.dumps([{'image': 'a.png', 'position': [0, 0, 10]}]))
    with pytest.raises(InputError):
        read_eops(str(tmp_path / 'eops.json'))

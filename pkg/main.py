import argparse
import json
import logging
import os
import sys
import time
from typing import Callable, Dict, List, Optional

import numpy as np

from core import leaf_morphology, leaf_segmentation, lens_distortion, ortho_geometry, plant_localization
from core import synthetic_field
from core.exceptions import ConfigError, InputError, NumericError, PipelineError
from core.raster import load_image, save_image
from inputs.constants import EXIT_CODES
from inputs.pipeline_config import PipelineConfig, apply_overrides, load_config
from output import overlay_generator
from output.summary_report_generator import RunManifest, RunReportGenerator, write_manifest

logger = logging.getLogger(__name__)


def _out(config: PipelineConfig, name: str) -> str:
    os.makedirs(config.output_dir, exist_ok=True)
    return os.path.join(config.output_dir, name)


def _load_mask(args) -> leaf_segmentation.LeafMask:
    """Mask from --mask (PNG, nonzero = leaf) or by segmenting --image."""
    if getattr(args, 'mask', None):
        return leaf_segmentation.LeafMask.from_array(load_image(args.mask).samples[:, :, 0] > 127)
    if not getattr(args, 'image', None):
        raise InputError("Either --image or --mask is required")
    return leaf_segmentation.segment_leaves(load_image(args.image), args.config.thresholds(), args.threads)


def _camera(args) -> lens_distortion.SmacCamera:
    path = args.config.section('camera')
    if not path:
        raise ConfigError("No camera model given (--camera or the 'camera' config entry)")
    return lens_distortion.load_camera(path)


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def cmd_undistort(args, manifest: RunManifest) -> None:
    cam = _camera(args)
    img = load_image(args.image)
    out = args.out or _out(args.config, 'undistorted.png')
    save_image(lens_distortion.undistort_image(img, cam, threads=args.threads), out)
    manifest.inputs.update(image=args.image)
    manifest.outputs.append(out)


def cmd_rop(args, manifest: RunManifest) -> None:
    rop = args.config.section('rop')
    matches = ortho_geometry.read_correspondences(args.matches)
    model, inliers = ortho_geometry.ransac_rop(matches, rop['threshold'], rop['iterations'], rop['seed'])
    result = {'scale': model.scale, 'kappa': model.kappa, 'tx': model.t[0], 'ty': model.t[1],
              'inliers': inliers.tolist(), 'n_matches': len(matches)}
    out = _out(args.config, 'rop.json')
    with open(out, 'w', encoding='utf-8') as f:
        json.dump(result, f, indent=2)
    manifest.seed = rop['seed']
    manifest.inputs.update(matches=args.matches)
    manifest.outputs.append(out)
    manifest.results.update(scale=model.scale, kappa=model.kappa, n_inliers=len(inliers))


def cmd_absorient(args, manifest: RunManifest) -> None:
    local, mapping = ortho_geometry.read_gcps(args.gcps)
    transform = ortho_geometry.absolute_orientation(local, mapping)
    result = {'scale': transform.scale, 'rotation': np.asarray(transform.rotation).tolist(),
              'translation': np.asarray(transform.translation).tolist()}
    if args.checks:
        check_local, check_map = ortho_geometry.read_gcps(args.checks)
        rmse = ortho_geometry.checkpoint_rmse(transform, check_local, check_map)
        result['checkpoint_rmse'] = {'x': rmse[0], 'y': rmse[1], 'z': rmse[2]}
        manifest.results.update(rmse_x=rmse[0], rmse_y=rmse[1], rmse_z=rmse[2])
    out = _out(args.config, 'absorient.json')
    with open(out, 'w', encoding='utf-8') as f:
        json.dump(result, f, indent=2)
    manifest.inputs.update(gcps=args.gcps)
    manifest.outputs.append(out)
    manifest.results.update(scale=transform.scale)


def cmd_dem(args, manifest: RunManifest) -> None:
    cloud = ortho_geometry.read_point_cloud(args.cloud)
    grid = args.config.section('dem')
    cell = grid['cell']
    lo = cloud.points[:, :2].min(axis=0)
    hi = cloud.points[:, :2].max(axis=0)
    origin = tuple(grid['origin']) if grid['origin'] else (float(lo[0]), float(lo[1]))
    nx = grid['nx'] or int(np.floor((hi[0] - origin[0]) / cell)) + 1
    ny = grid['ny'] or int(np.floor((hi[1] - origin[1]) / cell)) + 1
    dem = ortho_geometry.interpolate_dem(cloud, origin, cell, nx, ny)
    out = _out(args.config, 'dem.csv')
    ortho_geometry.write_dem(dem, out)
    manifest.inputs.update(cloud=args.cloud)
    manifest.outputs.append(out)
    manifest.results.update(nx=nx, ny=ny, cell=cell)


def cmd_ortho(args, manifest: RunManifest) -> None:
    cam = _camera(args)
    dem = ortho_geometry.read_dem(args.dem)
    eops = {os.path.basename(eo.image): eo for eo in ortho_geometry.read_eops(args.eops)}
    images = []
    for path in args.images:
        name = os.path.basename(path)
        if name not in eops:
            raise InputError(f"No exterior orientation for image {name}")
        images.append((load_image(path), eops[name]))
    ortho_cfg = args.config.section('ortho')
    extent = tuple(ortho_cfg['extent']) if ortho_cfg.get('extent') else None
    mosaic = ortho_geometry.orthorectify(images, cam, dem, ortho_cfg['gsd'], extent, threads=args.threads)
    out = _out(args.config, 'orthomosaic.png')
    save_image(mosaic, out)
    manifest.inputs.update(dem=args.dem, eops=args.eops, images=','.join(args.images))
    manifest.outputs.append(out)
    manifest.results.update(width=mosaic.width, height=mosaic.height)


def cmd_segment(args, manifest: RunManifest) -> None:
    mask = _load_mask(args)
    out = _out(args.config, 'mask.png')
    leaf_segmentation.save_mask(mask, out)
    manifest.inputs.update(image=args.image)
    manifest.outputs.append(out)
    manifest.results.update(alpha=leaf_segmentation.count_pixels(mask))


def cmd_count(args, manifest: RunManifest) -> None:
    mask = _load_mask(args)
    count = args.config.section('count')
    if count['rho']:
        cal = leaf_segmentation.LeafCountCalibration(count['rho'])
    elif count['calib_region'] and count['calib_leaves']:
        cal = leaf_segmentation.calibrate_rho_from_region(mask, tuple(count['calib_region']), count['calib_leaves'])
    else:
        raise InputError("Give --rho or both --calib-region and --calib-leaves")
    alpha = leaf_segmentation.count_pixels(mask)
    estimate = leaf_segmentation.estimate_leaf_count(alpha, cal)
    result = {'alpha': alpha, 'rho': cal.rho, 'lambda': estimate.value, 'lambda_rounded': estimate.rounded}
    out = _out(args.config, 'count.json')
    with open(out, 'w', encoding='utf-8') as f:
        json.dump(result, f, indent=2)
    tiles = args.config.section('regions').get('tiles', [])
    if tiles:
        table = leaf_segmentation.count_leaves_in_tiles(
            [leaf_segmentation.LeafMask.from_array(mask.bits[r0:r1, c0:c1]) for r0, c0, r1, c1 in tiles], cal)
        tile_csv = _out(args.config, 'count_tiles.csv')
        table.to_csv(tile_csv, index=False, float_format='%.6f')
        manifest.outputs.append(tile_csv)
    manifest.inputs.update(image=args.image or args.mask)
    manifest.outputs.append(out)
    manifest.results.update(result)


def cmd_heatmap(args, manifest: RunManifest) -> None:
    mask = _load_mask(args)
    density = leaf_segmentation.density_heatmap(mask, args.config.section('segmentation')['window'])
    png, csv = _out(args.config, 'heatmap.png'), _out(args.config, 'heatmap.csv')
    preview = _out(args.config, 'heatmap_preview.png')
    leaf_segmentation.save_density_map(density, png, csv)
    save_image(overlay_generator.heatmap_preview(density), preview)
    manifest.inputs.update(image=args.image or args.mask)
    manifest.outputs += [png, csv, preview]
    manifest.results.update(max_count=int(density.counts.max()), window=density.window)


def cmd_leaves(args, manifest: RunManifest) -> None:
    mask = _load_mask(args)
    morph = args.config.section('morphology')
    segments = leaf_morphology.segment_leaf_shapes(mask, args.config.angles(),
                                                   **args.config.morphology_kwargs())
    table = leaf_morphology.leaf_table(segments, morph['gsd'])
    out = _out(args.config, 'leaves.csv')
    table.to_csv(out, index=False, float_format='%.6f')
    overlay = _out(args.config, 'leaf_overlay.png')
    base = load_image(args.image) if args.image else mask.to_image()
    save_image(overlay_generator.leaf_overlay(base, segments), overlay)
    manifest.inputs.update(image=args.image or args.mask)
    manifest.outputs += [out, overlay]
    manifest.results.update(leaf_count=len(segments))


def _regions(plants, assign, tiles) -> List[plant_localization.Region]:
    regions = []
    taken = np.zeros(plants.count, dtype=bool)
    for r0, c0, r1, c1 in tiles:
        inside = (plants.plants[:, 0] >= r0) & (plants.plants[:, 0] < r1) \
            & (plants.plants[:, 1] >= c0) & (plants.plants[:, 1] < c1) & ~taken
        if not inside.any():
            continue
        taken |= inside
        regions.append(plant_localization.Region(
            bounds=(r0, c0, r1, c1), init=plant_localization.PlantConfiguration(plants.plants[inside]),
            assign=plant_localization.RowColumnAssignment(assign.row_of[inside], assign.col_of[inside])))
    if not taken.all():
        raise ConfigError(f"Plants {np.flatnonzero(~taken).tolist()} fall outside every region tile")
    return regions


def cmd_locate(args, manifest: RunManifest) -> None:
    mask = _load_mask(args)
    plants, assign = plant_localization.read_plants(args.init)
    if assign is None:
        grid = args.config.section('grid')
        if not (grid['rows'] and grid['cols']):
            raise InputError("The init file has no row_id/col_id; give --rows and --cols")
        assign = plant_localization.assign_rows_columns(plants, grid['rows'], grid['cols'])
    config = args.config.localization()
    tiles = args.config.section('regions').get('tiles', [])
    if tiles:
        regions = _regions(plants, assign, tiles)
        results = plant_localization.localize_regions(mask, regions, config, threads=args.threads)
        estimate = np.zeros_like(plants.plants)
        taken = np.zeros(plants.count, dtype=bool)
        for region, result in zip(regions, results):
            r0, c0, r1, c1 = region.bounds
            inside = (plants.plants[:, 0] >= r0) & (plants.plants[:, 0] < r1) \
                & (plants.plants[:, 1] >= c0) & (plants.plants[:, 1] < c1) & ~taken
            estimate[inside] = result.plants.plants
            taken |= inside
        final = plant_localization.PlantConfiguration(estimate)
        sweeps = max(r.sweeps for r in results)
        empty = sorted({p for r in results for p in r.empty_clusters})
    else:
        result = plant_localization.icd_optimize(plant_localization.build_pixel_set(mask), plants, assign, config)
        final, sweeps, empty = result.plants, result.sweeps, result.empty_clusters
        manifest.results.update(sigma=result.sigma.sigma, final_cost=result.trace[-1] if result.trace else None)

    out = _out(args.config, 'plants_est.csv')
    plant_localization.write_plants(final, out)
    overlay = _out(args.config, 'plant_overlay.png')
    base = load_image(args.image) if args.image else mask.to_image()
    truth = plant_localization.read_plants(args.truth)[0] if args.truth else None
    save_image(overlay_generator.plant_overlay(base, final, truth), overlay)
    manifest.outputs += [out, overlay]

    if args.cost_map is not None:
        zset = plant_localization.build_pixel_set(mask)
        sigma = plant_localization.estimate_sigma(zset, final, config.sigma_floor)
        prior = plant_localization.prior_params(final, assign, args.cost_map, config.sigma_floor)
        rows, cols = plant_localization.candidate_window(final.plants[args.cost_map], config.window, zset.shape)
        costs = plant_localization.cost_map(args.cost_map, zset, final, sigma, prior, config.mode, rows, cols)
        for suffix, gamma in (('linear', None), ('gamma', 0.3)):
            path = _out(args.config, f"cost_map_{args.cost_map}_{suffix}.png")
            save_image(overlay_generator.cost_map_image(costs, gamma), path)
            manifest.outputs.append(path)

    manifest.inputs.update(init=args.init, image=args.image or args.mask)
    manifest.results.update(sweeps=sweeps, empty_clusters=empty, n_plants=final.count)


def cmd_synth(args, manifest: RunManifest) -> None:
    spec = synthetic_field.load_field_spec(args.spec) if args.spec else args.config.field_spec()
    if args.seed is not None:
        spec = synthetic_field.FieldSpec.from_dict({**spec.to_dict(), 'seed': args.seed})
    image, truth = synthetic_field.generate_field(spec)
    out = _out(args.config, 'field.png')
    save_image(image, out)
    synthetic_field.write_truth(truth, args.config.output_dir)
    manifest.seed = spec.seed
    manifest.outputs += [out] + [_out(args.config, n) for n in ('plants.csv', 'plants_init.csv',
                                                                  'leaves.csv', 'mask.png')]
    manifest.results.update(n_plants=len(truth.plants), leaf_count=truth.leaf_count)


def cmd_score(args, manifest: RunManifest) -> None:
    est, _ = plant_localization.read_plants(args.est)
    truth, _ = plant_localization.read_plants(args.truth)
    mean_err, max_err, pairs = synthetic_field.score_localization(est, truth.plants)
    result = {'mean_error_px': mean_err, 'max_error_px': max_err, 'pairs': pairs}
    out = _out(args.config, 'score.json')
    with open(out, 'w', encoding='utf-8') as f:
        json.dump(result, f, indent=2)
    manifest.inputs.update(est=args.est, truth=args.truth)
    manifest.outputs.append(out)
    manifest.results.update(mean_error_px=mean_err, max_error_px=max_err)


def cmd_report(args, manifest: Optional[RunManifest]) -> None:
    path = RunReportGenerator(args.config.output_dir).generate()
    logger.info(f"Report: {path}")


COMMANDS: Dict[str, Callable] = {
    'undistort': cmd_undistort, 'rop': cmd_rop, 'absorient': cmd_absorient, 'dem': cmd_dem,
    'ortho': cmd_ortho, 'segment': cmd_segment, 'count': cmd_count, 'heatmap': cmd_heatmap,
    'leaves': cmd_leaves, 'locate': cmd_locate, 'synth': cmd_synth, 'score': cmd_score,
    'report': cmd_report,
}


# ----------------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='leafmap', description='UAV field phenotyping: orthomosaics, leaf counts, leaf shapes and plant positions.')
    parser.add_argument('--config', help='pipeline config JSON (default: $LEAFMAP_CONFIG or built-in defaults)')
    parser.add_argument('--output-dir', help='directory for all outputs (overrides output_dir)')
    parser.add_argument('--threads', type=int, default=1, help='data-parallel width (default 1)')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true', help='debug logging')
    verbosity.add_argument('--quiet', action='store_true', help='warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('undistort', help='resample an image into distortion-free geometry')
    p.add_argument('--image', required=True)
    p.add_argument('--camera', help='SMAC camera JSON')
    p.add_argument('--out', help='output PNG (default <output_dir>/undistorted.png)')

    p = sub.add_parser('rop', help='RANSAC similarity between two nadir images from a match CSV (x1,y1,x2,y2)')
    p.add_argument('--matches', required=True)
    p.add_argument('--threshold', type=float)
    p.add_argument('--iterations', type=int)
    p.add_argument('--seed', type=int)

    p = sub.add_parser('absorient', help='7-parameter similarity from GCPs (Xlocal..Zmap CSV)')
    p.add_argument('--gcps', required=True)
    p.add_argument('--checks', help='independent check points in the same format')

    p = sub.add_parser('dem', help='IDW DEM from a point cloud CSV (X,Y,Z)')
    p.add_argument('--cloud', required=True)
    p.add_argument('--cell', type=float)
    p.add_argument('--origin', type=float, nargs=2, metavar=('X', 'Y'))
    p.add_argument('--nx', type=int)
    p.add_argument('--ny', type=int)

    p = sub.add_parser('ortho', help='nearest-camera orthomosaic over a DEM')
    p.add_argument('--images', nargs='+', required=True)
    p.add_argument('--eops', required=True, help='JSON array of {image, position, rotation}')
    p.add_argument('--dem', required=True)
    p.add_argument('--camera')
    p.add_argument('--gsd', type=float)

    for name, text in (('segment', 'HSV leaf mask'), ('count', 'leaf count from pixel area'),
                       ('heatmap', 'local leaf density'), ('leaves', 'individual leaf shapes'),
                       ('locate', 'plant positions by ICD')):
        p = sub.add_parser(name, help=text)
        source = p.add_mutually_exclusive_group(required=True)
        source.add_argument('--image')
        source.add_argument('--mask', help='precomputed mask PNG')
        if name == 'count':
            p.add_argument('--rho', type=float, help='pixels per leaf')
            p.add_argument('--calib-region', type=int, nargs=4, metavar=('ROW0', 'COL0', 'ROW1', 'COL1'))
            p.add_argument('--calib-leaves', type=int, help='hand count inside the calibration region')
        elif name == 'heatmap':
            p.add_argument('--window', type=int)
        elif name == 'leaves':
            p.add_argument('--gsd', type=float)
        elif name == 'locate':
            p.add_argument('--init', required=True, help='CSV plant_id,i,j[,row_id,col_id]')
            p.add_argument('--truth', help='truth CSV drawn in green on the overlay')
            p.add_argument('--mode', choices=[m.value for m in plant_localization.LocalizationMode])
            p.add_argument('--window', type=int)
            p.add_argument('--sweeps', type=int)
            p.add_argument('--rows', type=int)
            p.add_argument('--cols', type=int)
            p.add_argument('--cost-map', type=int, metavar='PLANT')

    p = sub.add_parser('synth', help='seeded synthetic field with ground truth')
    p.add_argument('--spec', help='FieldSpec JSON (default: synth section of the config)')
    p.add_argument('--seed', type=int)

    p = sub.add_parser('score', help='match estimated plants to truth')
    p.add_argument('--est', required=True)
    p.add_argument('--truth', required=True)

    sub.add_parser('report', help='PDF summary of the manifests in the output directory')
    return parser


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)
    overrides = {'output_dir': args.output_dir}
    if args.command in ('undistort', 'ortho'):
        overrides['camera'] = get('camera')
    if args.command == 'rop':
        overrides.update({'rop.threshold': get('threshold'), 'rop.iterations': get('iterations'),
                          'rop.seed': get('seed')})
    elif args.command == 'dem':
        overrides.update({'dem.cell': get('cell'), 'dem.origin': get('origin'), 'dem.nx': get('nx'),
                          'dem.ny': get('ny')})
    elif args.command == 'ortho':
        overrides['ortho.gsd'] = get('gsd')
    elif args.command == 'count':
        overrides.update({'count.rho': get('rho'), 'count.calib_region': get('calib_region'),
                          'count.calib_leaves': get('calib_leaves')})
    elif args.command == 'heatmap':
        overrides['segmentation.window'] = get('window')
    elif args.command == 'leaves':
        overrides['morphology.gsd'] = get('gsd')
    elif args.command == 'locate':
        overrides.update({'localization.mode': get('mode'), 'localization.window': get('window'),
                          'localization.sweeps': get('sweeps'), 'grid.rows': get('rows'), 'grid.cols': get('cols')})
    return overrides


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s')

    try:
        args.config = apply_overrides(load_config(args.config), _overrides(args))
        manifest = RunManifest(subcommand=args.command, config_hash=args.config.config_hash(args.command))
        start = time.perf_counter()
        COMMANDS[args.command](args, manifest)
        if args.command != 'report':
            manifest.timed('total', start)
            write_manifest(manifest, args.config.output_dir)
    except ConfigError as e:
        return _fail('config', e)
    except (InputError, OSError) as e:
        return _fail('input', e)
    except NumericError as e:
        return _fail('numeric', e)
    except PipelineError as e:
        return _fail('input', e)
    return EXIT_CODES['success']


def _fail(kind: str, error: Exception) -> int:
    logger.error(f"{type(error).__name__}: {error}")
    print(f"error: {type(error).__name__}: {error}", file=sys.stderr)
    return EXIT_CODES[kind]


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

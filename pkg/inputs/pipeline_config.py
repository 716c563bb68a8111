#!/usr/bin/env python3
"""
pipeline_config.py - Pipeline Configuration
Loads the JSON pipeline configuration, merges it over the built-in defaults,
applies command-line overrides and validates every section.
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional

from core.exceptions import ConfigError, InputError
from core.leaf_morphology import AngleThresholds
from core.leaf_segmentation import SegmentationThresholds
from core.plant_localization import LocalizationConfig
from core.synthetic_field import FieldSpec
from inputs.constants import (ANGLE_THRESHOLDS, CONFIG_ENV_VAR, DEFAULT_GSD, DEM_CELL, HEATMAP_WINDOW,
                              LOCALIZATION_DEFAULTS, MORPHOLOGY_DEFAULTS, RANSAC_DEFAULTS,
                              SEGMENTATION_THRESHOLDS)

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    'camera': None,
    'segmentation': {**SEGMENTATION_THRESHOLDS, 'window': HEATMAP_WINDOW},
    'morphology': {**ANGLE_THRESHOLDS, **MORPHOLOGY_DEFAULTS, 'gsd': DEFAULT_GSD},
    'localization': dict(LOCALIZATION_DEFAULTS),
    'regions': {'tiles': []},
    'ortho': {'gsd': DEFAULT_GSD, 'extent': None},
    'dem': {'cell': DEM_CELL, 'origin': None, 'nx': None, 'ny': None},
    'count': {'rho': None, 'calib_region': None, 'calib_leaves': None},
    'grid': {'rows': None, 'cols': None},
    'rop': dict(RANSAC_DEFAULTS),
    'synth': {},
    'output_dir': 'output_data',
}

# Keys ('section' or 'section.key') each subcommand reads; their effective values feed the config hash.
_TAUS = tuple(f'segmentation.{k}' for k in SEGMENTATION_THRESHOLDS)
SUBCOMMAND_SECTIONS = {
    'undistort': ('camera',),
    'rop': ('rop',),
    'absorient': (),
    'dem': ('dem',),
    'ortho': ('camera', 'ortho'),
    'segment': _TAUS,
    'count': _TAUS + ('count', 'regions'),
    'heatmap': _TAUS + ('segmentation.window',),
    'leaves': _TAUS + ('morphology',),
    'locate': _TAUS + ('localization', 'regions', 'grid'),
    'synth': ('synth',),
    'score': (),
    'report': (),
}


@dataclass
class PipelineConfig:
    values: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: Optional[str] = None

    def section(self, name: str) -> Any:
        if name not in self.values:
            raise ConfigError(f"Unknown configuration section '{name}'")
        return self.values[name]

    @property
    def output_dir(self) -> str:
        return self.values['output_dir']

    # Typed views; validation failures surface as ConfigError.
    def thresholds(self):
        return _typed(SegmentationThresholds.from_dict, self.section('segmentation'), 'segmentation')

    def angles(self):
        m = self.section('morphology')
        return _typed(lambda d: AngleThresholds(ta=d['ta'], tb=d['tb'], tc=d['tc']), m, 'morphology')

    def morphology_kwargs(self) -> Dict[str, Any]:
        m = self.section('morphology')
        return {k: m[k] for k in MORPHOLOGY_DEFAULTS}

    def localization(self):
        return _typed(lambda d: LocalizationConfig(**d), self.section('localization'), 'localization')

    def field_spec(self):
        return _typed(FieldSpec.from_dict, self.section('synth'), 'synth')

    def validate(self) -> None:
        self.thresholds()
        self.angles()
        self.localization()
        self.field_spec()
        window = self.section('segmentation')['window']
        if not isinstance(window, int) or window < 1 or window % 2 == 0:
            raise ConfigError(f"segmentation.window must be a positive odd integer, got {window}")
        for key in ('max_width', 'max_gap', 'min_slices'):
            if self.section('morphology')[key] < 1:
                raise ConfigError(f"morphology.{key} must be at least 1")
        if self.section('morphology')['gsd'] <= 0 or self.section('ortho')['gsd'] <= 0:
            raise ConfigError("GSD values must be positive")
        rop = self.section('rop')
        if rop['threshold'] <= 0 or rop['iterations'] < 1:
            raise ConfigError("rop.threshold must be positive and rop.iterations at least 1")
        self._validate_dem()
        self._validate_count()
        for key, value in self.section('grid').items():
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"grid.{key} must be a positive integer, got {value}")
        for tile in self.section('regions').get('tiles', []):
            if len(tile) != 4 or tile[0] >= tile[2] or tile[1] >= tile[3]:
                raise ConfigError(f"Region tile {tile} must be [row0, col0, row1, col1] with row0<row1, col0<col1")

    def _validate_dem(self) -> None:
        dem = self.section('dem')
        if dem['cell'] <= 0:
            raise ConfigError(f"dem.cell must be positive, got {dem['cell']}")
        if dem['origin'] is not None and len(dem['origin']) != 2:
            raise ConfigError("dem.origin must be [X, Y]")
        for key in ('nx', 'ny'):
            if dem[key] is not None and (not isinstance(dem[key], int) or dem[key] < 1):
                raise ConfigError(f"dem.{key} must be a positive integer, got {dem[key]}")

    def _validate_count(self) -> None:
        count = self.section('count')
        if count['rho'] is not None and count['rho'] <= 0:
            raise ConfigError(f"count.rho must be positive, got {count['rho']}")
        region = count['calib_region']
        if region is not None and (len(region) != 4 or region[0] >= region[2] or region[1] >= region[3]):
            raise ConfigError(f"count.calib_region {region} must be [row0, col0, row1, col1] with row0<row1, col0<col1")
        if count['calib_leaves'] is not None and count['calib_leaves'] < 1:
            raise ConfigError("count.calib_leaves must be at least 1")

    def effective(self, keys: Iterable[str]) -> Dict[str, Any]:
        """Values for 'section' or 'section.key' entries; a camera path brings the camera file's values."""
        result: Dict[str, Any] = {}
        for dotted in keys:
            name, _, key = dotted.partition('.')
            value = self.section(name)
            if key:
                result.setdefault(name, {})[key] = value[key]
            elif name == 'camera':
                result[name] = {'path': value, 'model': _camera_values(value)}
            else:
                result[name] = value
        return result

    def config_hash(self, subcommand: Optional[str] = None) -> str:
        """SHA-256 of the canonical JSON of the parameters the subcommand uses."""
        keys = SUBCOMMAND_SECTIONS.get(subcommand, tuple(self.values)) if subcommand else tuple(self.values)
        payload = json.dumps(self.effective(keys), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def _camera_values(path: Optional[str]) -> Any:
    """Parsed camera JSON, or None when there is no readable file (the subcommand reports that)."""
    if not path:
        return None
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError):
        return None


def _typed(factory, data, name):
    try:
        return factory(data)
    except (InputError, TypeError, KeyError, ValueError) as e:
        raise ConfigError(f"Invalid '{name}' configuration: {e}") from e


def _merge(base: Dict[str, Any], update: Dict[str, Any], path: str = '') -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base and path != 'synth.':
            raise ConfigError(f"Unknown configuration key '{where}'")
        if isinstance(base.get(key), dict) and key != 'synth':
            if not isinstance(value, dict):
                raise ConfigError(f"Configuration section '{where}' must be an object")
            merged[key] = _merge(base[key], value, f"{where}.")
        elif key == 'synth':
            if not isinstance(value, dict):
                raise ConfigError("Configuration section 'synth' must be an object")
            merged[key] = {**base.get(key, {}), **value}
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Defaults, then the file at ``path`` (or $LEAFMAP_CONFIG when path is None)."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    config = PipelineConfig()
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("The config file must contain a JSON object")
        config = PipelineConfig(values=_merge(config.values, data), source=path)
        logger.info(f"Configuration loaded from {path}")
    config.validate()
    return config


def apply_overrides(config: PipelineConfig, overrides: Dict[str, Any]) -> PipelineConfig:
    """Flag values keyed 'section.key' (or a top-level key) win over the file; None means unset."""
    update: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        parts = dotted.split('.')
        target = update
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    result = PipelineConfig(values=_merge(config.values, update), source=config.source)
    result.validate()
    return result

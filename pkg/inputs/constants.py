# leafmap_constants.py
import math

# HSV segmentation thresholds (hue in [0,180), saturation/value in [0,255])
SEGMENTATION_THRESHOLDS = {
    'tau1': 30,
    'tau2': 79,
    'tau3': 30,
    'tau4': 163
}

# Heat map neighbourhood (pixels, odd)
HEATMAP_WINDOW = 41

# Leaf slice angle thresholds (radians)
ANGLE_THRESHOLDS = {
    'ta': math.pi / 5,
    'tb': math.pi / 8,
    'tc': math.pi / 6
}

# Leaf morphology defaults (pixels unless noted), tuned for 1.5 cm GSD
MORPHOLOGY_DEFAULTS = {
    'smooth_radius': 2,
    'magnitude_floor': 0.05,
    'max_width': 60,
    'max_gap': 30,
    'width_ratio': 2.0,      # slices wider than this x component median are discarded
    'min_slices': 3,
    'min_aspect': 1.0
}

# SMAC inversion
SMAC_INVERSION_TOL = 1e-6    # mm
SMAC_INVERSION_MAX_ITER = 50
SMAC_INVERSION_RELAXATION = 1.0  # 1 = plain fixed-point step
SMAC_DEFAULT_R0 = 0.0        # mm

# DEM interpolation
IDW_NEIGHBOURS = 8
IDW_POWER = 2.0

# RANSAC defaults
RANSAC_DEFAULTS = {
    'threshold': 1.0,        # pixels
    'iterations': 500,
    'seed': 0
}

# Plant localization defaults
LOCALIZATION_DEFAULTS = {
    'mode': 'full',
    'window': 40,            # pixels, half-width of candidate grid
    'sweeps': 20,
    'epsilon': 1e-3,
    'sigma_floor': 0.5,      # pixels
    'closed_form': False
}

# Ground sampling distance of the reference flights (m/pixel)
DEFAULT_GSD = 0.015

# Default DEM cell size (m)
DEM_CELL = 0.1

# Geometry tolerances
ROTATION_ORTHONORMAL_TOL = 1e-9
DEGENERATE_EPS = 1e-12

# Exit statuses of the command-line driver
EXIT_CODES = {
    'success': 0,
    'config': 2,
    'input': 3,
    'numeric': 4
}

# Environment variable naming the default pipeline config
CONFIG_ENV_VAR = 'LEAFMAP_CONFIG'

"""Individual leaf segmentation from the binary leaf mask.

Leaves are modelled as chains of slices: pixel-wide lines joining two edge
pixels whose mask gradients point at each other (a stroke width transform).
Slices are merged into segments when they touch and share a direction, and
segments split by occlusions are bridged along their axis.

Angles use x to the right and y up. A slice angle ``theta`` in [0, pi) is the
slice normal, which is the direction of the leaf axis.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from skimage import draw

from core.exceptions import InputError
from core.leaf_segmentation import LeafMask
from core.raster import PixelCoord
from inputs.constants import ANGLE_THRESHOLDS, MORPHOLOGY_DEFAULTS

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
_RAY_STEP = 0.5
_EDGE_CHUNK = 4096
_LATERAL_TOLERANCE = 0.5  # fraction of the mean stroke width
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def folded_pi_distance(a, b):
    """Distance between two undirected angles on [0, pi)."""
    d = np.mod(np.abs(np.asarray(a, dtype=np.float64) - b), math.pi)
    return np.minimum(d, math.pi - d)


@dataclass(frozen=True)
class AngleThresholds:
    ta: float = ANGLE_THRESHOLDS['ta']
    tb: float = ANGLE_THRESHOLDS['tb']
    tc: float = ANGLE_THRESHOLDS['tc']

    def __post_init__(self):
        for name in ('ta', 'tb', 'tc'):
            if not 0 < getattr(self, name) < math.pi:
                raise InputError(f"Angle threshold {name} must lie in (0, pi)")


@dataclass(frozen=True, eq=False)
class GradientField:
    angle: np.ndarray
    magnitude: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.angle.shape


@dataclass(frozen=True, eq=False)
class LeafSlice:
    a: PixelCoord
    b: PixelCoord
    pixels: np.ndarray = field(repr=False)  # (n, 2) rows, cols
    theta: float
    ga: float = 0.0
    gb: float = 0.0

    def __post_init__(self):
        if self.a == self.b:
            raise InputError("A leaf slice needs two distinct endpoints")

    @property
    def width(self) -> float:
        """Stroke width |AB| in pixels."""
        return math.hypot(self.b.i - self.a.i, self.b.j - self.a.j)

    @property
    def midpoint(self) -> np.ndarray:
        return np.array([(self.a.i + self.b.i) / 2.0, (self.a.j + self.b.j) / 2.0])


@dataclass(frozen=True, eq=False)
class LeafSegment:
    slices: Tuple[LeafSlice, ...]
    pixels: np.ndarray = field(repr=False)  # (n, 2) rows, cols
    axis: np.ndarray = field(repr=False)    # unit vector (row, col) along the leaf

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def theta(self) -> float:
        """Axial mean of the slice angles."""
        doubled = np.array([2.0 * s.theta for s in self.slices])
        return float(np.mod(math.atan2(np.sin(doubled).sum(), np.cos(doubled).sum()) / 2.0, math.pi))

    @property
    def midpoints(self) -> np.ndarray:
        return np.array([s.midpoint for s in self.slices]).reshape(-1, 2)


def _direction(theta) -> Tuple[np.ndarray, np.ndarray]:
    """(d_row, d_col) of a direction angle measured with y up."""
    return -np.sin(theta), np.cos(theta)


# ----------------------------------------------------------------------------
# Gradients and slices
# ----------------------------------------------------------------------------

def gradient_angles(mask: LeafMask, smooth_radius: int = MORPHOLOGY_DEFAULTS['smooth_radius'],
                    magnitude_floor: float = MORPHOLOGY_DEFAULTS['magnitude_floor']) -> GradientField:
    """Gradient direction of the box-smoothed mask; invalid where the magnitude is small."""
    if smooth_radius < 0:
        raise InputError("smooth_radius cannot be negative")
    smoothed = ndimage.uniform_filter(mask.bits.astype(np.float64), size=2 * smooth_radius + 1, mode='nearest')
    d_row, d_col = np.gradient(smoothed)
    gx, gy = d_col, -d_row
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), TWO_PI)
    angle[angle >= TWO_PI] = 0.0
    return GradientField(angle=angle, magnitude=magnitude, valid=magnitude > magnitude_floor)


def opposite_edge_test(ga: float, gb: float, ta: float) -> bool:
    d = (ga - gb + math.pi) % TWO_PI
    return min(d, TWO_PI - d) < ta


def slice_angle(ga: float, gb: float) -> float:
    return ((ga + gb) / 2.0) % math.pi


def edge_pixels(mask: LeafMask) -> np.ndarray:
    """Mask pixels with at least one 8-neighbour outside the mask, row-major."""
    interior = ndimage.binary_erosion(mask.bits, structure=_EIGHT_CONNECTED, border_value=0)
    return np.argwhere(mask.bits & ~interior)


def _cast_rays(mask: LeafMask, grad: GradientField, starts: np.ndarray,
               max_width: float) -> Tuple[np.ndarray, np.ndarray]:
    """March from each start pixel along its gradient; returns the last in-mask pixels and a hit flag."""
    h, w = mask.bits.shape
    n_steps = int(math.ceil(max_width / _RAY_STEP)) + 2
    t = _RAY_STEP * np.arange(1, n_steps + 1)
    d_row, d_col = _direction(grad.angle[starts[:, 0], starts[:, 1]])
    rows = np.floor(starts[:, :1] + d_row[:, np.newaxis] * t + 0.5).astype(np.intp)
    cols = np.floor(starts[:, 1:] + d_col[:, np.newaxis] * t + 0.5).astype(np.intp)
    in_bounds = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    inside = in_bounds & mask.bits[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)]

    exited = ~inside
    first_out = np.argmax(exited, axis=1)
    hit = exited.any(axis=1) & (first_out > 0)
    last = np.maximum(first_out - 1, 0)
    idx = np.arange(len(starts))
    ends = np.column_stack([rows[idx, last], cols[idx, last]])
    return ends, hit


def _stroke_owners(slices: Sequence[LeafSlice], shape: Tuple[int, int]) -> np.ndarray:
    """Index of the shortest slice covering each pixel, -1 where none does.

    Equal-width candidates are resolved in favour of the slice whose angle is
    closest to the median angle of the candidates at that pixel.
    """
    owner = np.full(shape, -1, dtype=np.intp)
    if not slices:
        return owner
    counts = [len(s.pixels) for s in slices]
    pixels = np.vstack([s.pixels for s in slices])
    frame = pd.DataFrame({
        'pix': pixels[:, 0] * shape[1] + pixels[:, 1],
        'sid': np.repeat(np.arange(len(slices)), counts),
        'width': np.repeat(np.round([s.width for s in slices], 6), counts),
        'theta': np.repeat([s.theta for s in slices], counts),
    })
    frame = frame[frame['width'] == frame.groupby('pix')['width'].transform('min')].copy()
    median = frame.groupby('pix')['theta'].transform('median')
    frame['score'] = folded_pi_distance(frame['theta'].to_numpy(), median.to_numpy())
    best = frame.sort_values(['pix', 'score', 'sid'], kind='mergesort').drop_duplicates('pix')
    owner.ravel()[best['pix'].to_numpy()] = best['sid'].to_numpy()
    return owner


def _keep_owning(slices: List[LeafSlice], shape: Tuple[int, int]) -> List[LeafSlice]:
    owner = _stroke_owners(slices, shape)
    owning = np.unique(owner[owner >= 0])
    return [slices[i] for i in owning]


def extract_slices(mask: LeafMask, grad: GradientField, ta: float,
                   max_width: float = MORPHOLOGY_DEFAULTS['max_width'],
                   width_ratio: Optional[float] = MORPHOLOGY_DEFAULTS['width_ratio']) -> List[LeafSlice]:
    """Stroke-width slices of the mask.

    From every valid edge pixel a ray is cast into the mask along the gradient.
    The last mask pixel before the ray leaves the mask closes the slice when its
    gradient opposes the start gradient. Only slices that are the shortest
    cover of at least one pixel survive; slices wider than ``width_ratio`` times
    the median width of their connected component are dropped.
    """
    if max_width < 1:
        raise InputError("max_width must be at least one pixel")
    if grad.shape != mask.bits.shape:
        raise InputError("Gradient field and mask differ in size")
    edges = edge_pixels(mask)
    edges = edges[grad.valid[edges[:, 0], edges[:, 1]]]

    candidates: List[LeafSlice] = []
    seen = set()
    for start in range(0, len(edges), _EDGE_CHUNK):
        chunk = edges[start:start + _EDGE_CHUNK]
        ends, hit = _cast_rays(mask, grad, chunk, max_width)
        for (ra, ca), (rb, cb), ok in zip(chunk.tolist(), ends.tolist(), hit.tolist()):
            if not ok or (ra, ca) == (rb, cb) or not grad.valid[rb, cb]:
                continue
            if math.hypot(rb - ra, cb - ca) > max_width:
                continue
            ga, gb = float(grad.angle[ra, ca]), float(grad.angle[rb, cb])
            if not opposite_edge_test(ga, gb, ta):
                continue
            key = (min((ra, ca), (rb, cb)), max((ra, ca), (rb, cb)))
            if key in seen:
                continue
            seen.add(key)
            line_rows, line_cols = draw.line(ra, ca, rb, cb)
            candidates.append(LeafSlice(a=PixelCoord(ra, ca), b=PixelCoord(rb, cb),
                                        pixels=np.column_stack([line_rows, line_cols]),
                                        theta=slice_angle(ga, gb), ga=ga, gb=gb))

    shape = mask.bits.shape
    slices = _keep_owning(candidates, shape)
    if width_ratio is not None and slices:
        labels, _ = ndimage.label(mask.bits, structure=_EIGHT_CONNECTED)
        widths = pd.Series([s.width for s in slices])
        component = pd.Series([labels[s.a.i, s.a.j] for s in slices])
        median = widths.groupby(component).transform('median')
        slices = [s for s, keep in zip(slices, (widths <= width_ratio * median).tolist()) if keep]
        slices = _keep_owning(slices, shape)
    logger.debug(f"{len(edges)} edge pixels -> {len(candidates)} candidate slices -> {len(slices)} kept")
    return slices


# ----------------------------------------------------------------------------
# Segments
# ----------------------------------------------------------------------------

def _medial_axis(slices: Sequence[LeafSlice]) -> np.ndarray:
    mids = np.array([s.midpoint for s in slices])
    axis = None
    if len(slices) > 1:
        centred = mids - mids.mean(axis=0)
        evals, evecs = np.linalg.eigh(centred.T @ centred)
        if evals[-1] > 1e-9:
            axis = evecs[:, -1]
    if axis is None:
        doubled = np.array([2.0 * s.theta for s in slices])
        theta = math.atan2(np.sin(doubled).sum(), np.cos(doubled).sum()) / 2.0
        axis = np.array(_direction(theta))
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return axis / np.linalg.norm(axis)


def make_segment(slices: Sequence[LeafSlice], pixels: Optional[np.ndarray] = None) -> LeafSegment:
    """Order slices along their medial direction; pixels default to the union of slice lines."""
    if not slices:
        raise InputError("A leaf segment needs at least one slice")
    axis = _medial_axis(slices)
    proj = np.array([s.midpoint @ axis for s in slices])
    order = np.argsort(proj, kind='stable')
    ordered = tuple(slices[i] for i in order)
    if pixels is None:
        pixels = np.unique(np.vstack([s.pixels for s in slices]), axis=0)
    return LeafSegment(slices=ordered, pixels=np.asarray(pixels, dtype=np.intp).reshape(-1, 2), axis=axis)


def _incidence(slices: Sequence[LeafSlice], offsets: Sequence[Tuple[int, int]], stride: int,
               n_keys: int) -> sparse.csr_matrix:
    rows, keys = [], []
    for idx, s in enumerate(slices):
        for dr, dc in offsets:
            rows.append(np.full(len(s.pixels), idx))
            keys.append((s.pixels[:, 0] + 1 + dr) * stride + s.pixels[:, 1] + 1 + dc)
    rows = np.concatenate(rows)
    keys = np.concatenate(keys)
    return sparse.csr_matrix((np.ones(len(rows)), (rows, keys)), shape=(len(slices), n_keys))


def _group(n: int, pairs: np.ndarray) -> np.ndarray:
    """Connected-component label per node given undirected edges."""
    if len(pairs) == 0:
        return np.arange(n)
    graph = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = csgraph.connected_components(graph, directed=False)
    return labels


def _segments_from_labels(parts: Sequence[Sequence[LeafSlice]]) -> List[LeafSegment]:
    segments = [make_segment(p) for p in parts]
    segments.sort(key=lambda seg: tuple(seg.pixels[np.lexsort((seg.pixels[:, 1], seg.pixels[:, 0]))[0]]))
    return segments


def merge_adjacent_slices(slices: Sequence[LeafSlice], tb: float) -> List[LeafSegment]:
    """Union slices whose pixel lines are 8-adjacent and whose angles differ by less than ``tb``."""
    if not slices:
        return []
    max_row = max(int(s.pixels[:, 0].max()) for s in slices)
    stride = max(int(s.pixels[:, 1].max()) for s in slices) + 3
    n_keys = (max_row + 3) * stride
    line = _incidence(slices, [(0, 0)], stride, n_keys)
    halo = _incidence(slices, [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)], stride, n_keys)
    touching = sparse.triu(halo @ line.T, k=1).tocoo()
    pairs = np.column_stack([touching.row, touching.col])
    if len(pairs):
        thetas = np.array([s.theta for s in slices])
        pairs = pairs[folded_pi_distance(thetas[pairs[:, 0]], thetas[pairs[:, 1]]) < tb]
    labels = _group(len(slices), pairs)
    parts: Dict[int, List[LeafSlice]] = {}
    for s, label in zip(slices, labels):
        parts.setdefault(int(label), []).append(s)
    segments = _segments_from_labels(list(parts.values()))
    logger.debug(f"{len(slices)} slices merged into {len(segments)} segments")
    return segments


def _terminal_slices(segment: LeafSegment) -> List[LeafSlice]:
    if segment.n_slices == 1:
        return [segment.slices[0]]
    return [segment.slices[0], segment.slices[-1]]


def _march_signs(segment: LeafSegment, terminal: LeafSlice) -> Tuple[int, ...]:
    if segment.n_slices == 1:
        return (1, -1)
    d_row, d_col = _direction(terminal.theta)
    outward = (terminal.midpoint - segment.midpoints.mean(axis=0)) @ np.array([d_row, d_col])
    if abs(outward) < 0.5:
        return (1, -1)
    return (1,) if outward > 0 else (-1,)


def _mean_width(segment: LeafSegment) -> float:
    return float(np.mean([s.width for s in segment.slices]))


def _lateral_offset(segment: LeafSegment, anchor: LeafSlice, point: np.ndarray) -> float:
    """Distance of ``point`` from the axis line of ``segment`` through ``anchor``."""
    delta = point - anchor.midpoint
    return float(abs(segment.axis[0] * delta[1] - segment.axis[1] * delta[0]))


def _collinear(segment: LeafSegment, terminal: LeafSlice, other: LeafSegment, hit: LeafSlice) -> bool:
    """Both segments see the other terminal within half a stroke width of their own axis."""
    return (_lateral_offset(segment, terminal, hit.midpoint) <= _LATERAL_TOLERANCE * _mean_width(segment)
            and _lateral_offset(other, hit, terminal.midpoint) <= _LATERAL_TOLERANCE * _mean_width(other))


def bridge_discontinuities(segments: Sequence[LeafSegment], grad: GradientField, tc: float,
                           max_gap: int = MORPHOLOGY_DEFAULTS['max_gap']) -> List[LeafSegment]:
    """Join segments whose terminal slices face each other across a gap of at most ``max_gap`` pixels.

    A bridge also needs each terminal to lie on the other segment's axis line, so neighbouring
    leaves at a small angle to each other stay apart.
    """
    if max_gap < 1:
        raise InputError("max_gap must be at least one pixel")
    if not segments:
        return []
    h, w = grad.shape
    order = sorted(range(len(segments)),
                   key=lambda k: int((segments[k].pixels[:, 0] * w + segments[k].pixels[:, 1]).min()))

    terminals: Dict[Tuple[int, int], List[Tuple[int, LeafSlice]]] = {}
    for k in order:
        for t in _terminal_slices(segments[k]):
            for r, c in t.pixels.tolist():
                terminals.setdefault((r, c), []).append((k, t))

    steps = np.arange(1, int(max_gap) + 1)
    pairs = []
    for k in order:
        segment = segments[k]
        for t in _terminal_slices(segment):
            d_row, d_col = _direction(t.theta)
            for sign in _march_signs(segment, t):
                rows = np.floor(t.pixels[:, :1] + sign * d_row * steps + 0.5).astype(int)
                cols = np.floor(t.pixels[:, 1:] + sign * d_col * steps + 0.5).astype(int)
                for ray_rows, ray_cols in zip(rows.tolist(), cols.tolist()):
                    for r, c in zip(ray_rows, ray_cols):
                        if not (0 <= r < h and 0 <= c < w):
                            break
                        hits = [other for other, hit in terminals.get((r, c), ())
                                if other != k and folded_pi_distance(t.theta, hit.theta) < tc
                                and _collinear(segment, t, segments[other], hit)]
                        if hits:
                            pairs.extend((k, other) for other in hits)
                            break

    labels = _group(len(segments), np.array(pairs, dtype=np.intp).reshape(-1, 2))
    parts: Dict[int, List[LeafSlice]] = {}
    for k in order:
        parts.setdefault(int(labels[k]), []).extend(segments[k].slices)
    bridged = _segments_from_labels(list(parts.values()))
    logger.debug(f"Bridging joined {len(segments)} segments into {len(bridged)}")
    return bridged


# ----------------------------------------------------------------------------
# Metrics and pipeline
# ----------------------------------------------------------------------------

def medial_length(segment: LeafSegment) -> float:
    """Arc length of the midpoint chain plus the pixel extent past both terminal midpoints (pixels)."""
    mids = segment.midpoints
    arc = float(np.sum(np.linalg.norm(np.diff(mids, axis=0), axis=1)))
    if len(segment.pixels) == 0:
        return arc
    proj = segment.pixels @ segment.axis
    first, last = mids[0] @ segment.axis, mids[-1] @ segment.axis
    return arc + max(0.0, first - proj.min()) + max(0.0, proj.max() - last)


def leaf_metrics(segment: LeafSegment, gsd: float) -> Tuple[float, float, float]:
    """(length m, mean width m, area m^2) of a leaf."""
    if segment.n_slices == 0:
        raise InputError("Cannot measure an empty leaf segment")
    if gsd <= 0:
        raise InputError("GSD must be positive")
    width = float(np.mean([len(s.pixels) for s in segment.slices]))
    return medial_length(segment) * gsd, width * gsd, len(segment.pixels) * gsd * gsd


def _owned_pixels(segments: Sequence[LeafSegment], shape: Tuple[int, int]) -> np.ndarray:
    """Per-pixel segment index from the stroke-width owner of every pixel."""
    slices = [s for seg in segments for s in seg.slices]
    slice_segment = np.repeat(np.arange(len(segments)), [seg.n_slices for seg in segments])
    owner = _stroke_owners(slices, shape)
    seg_map = np.full(shape, -1, dtype=np.intp)
    covered = owner >= 0
    seg_map[covered] = slice_segment[owner[covered]]
    return seg_map


def _pixels_by_label(seg_map: np.ndarray, n: int) -> List[np.ndarray]:
    rows, cols = np.nonzero(seg_map >= 0)
    labels = seg_map[rows, cols]
    order = np.argsort(labels, kind='stable')
    bounds = np.searchsorted(labels[order], np.arange(n + 1))
    coords = np.column_stack([rows[order], cols[order]])
    return [coords[bounds[k]:bounds[k + 1]] for k in range(n)]


def segment_leaf_shapes(mask: LeafMask, angles: AngleThresholds = AngleThresholds(),
                        smooth_radius: int = MORPHOLOGY_DEFAULTS['smooth_radius'],
                        magnitude_floor: float = MORPHOLOGY_DEFAULTS['magnitude_floor'],
                        max_width: float = MORPHOLOGY_DEFAULTS['max_width'],
                        max_gap: int = MORPHOLOGY_DEFAULTS['max_gap'],
                        width_ratio: Optional[float] = MORPHOLOGY_DEFAULTS['width_ratio'],
                        min_slices: int = MORPHOLOGY_DEFAULTS['min_slices'],
                        min_aspect: float = MORPHOLOGY_DEFAULTS['min_aspect']) -> List[LeafSegment]:
    """Full chain: gradients, slices, merging, bridging, leaf-shape filter and pixel ownership.

    Returned segments own disjoint pixel sets; mask pixels no slice claims
    go to the nearest leaf in the same connected mask component.
    """
    shape = mask.bits.shape
    grad = gradient_angles(mask, smooth_radius, magnitude_floor)
    slices = extract_slices(mask, grad, angles.ta, max_width, width_ratio)
    segments = merge_adjacent_slices(slices, angles.tb)
    segments = bridge_discontinuities(segments, grad, angles.tc, max_gap)
    if not segments:
        return []

    pixels = _pixels_by_label(np.where(mask.bits, _owned_pixels(segments, shape), -1), len(segments))
    leaves = []
    for seg, px in zip(segments, pixels):
        if seg.n_slices < min_slices:
            continue
        candidate = LeafSegment(slices=seg.slices, pixels=px, axis=seg.axis)
        width = np.mean([len(s.pixels) for s in seg.slices])
        if medial_length(candidate) < min_aspect * width:
            continue
        leaves.append(seg)
    if not leaves:
        return []

    seg_map = np.where(mask.bits, _owned_pixels(leaves, shape), -1)
    owned = seg_map >= 0
    orphans = mask.bits & ~owned
    if orphans.any() and owned.any():
        components, _ = ndimage.label(mask.bits, structure=_EIGHT_CONNECTED)
        _, (near_r, near_c) = ndimage.distance_transform_edt(~owned, return_indices=True)
        rows, cols = np.nonzero(orphans)
        nr, nc = near_r[rows, cols], near_c[rows, cols]
        same = components[rows, cols] == components[nr, nc]
        seg_map[rows[same], cols[same]] = seg_map[nr[same], nc[same]]

    result = [LeafSegment(slices=seg.slices, pixels=px, axis=seg.axis)
              for seg, px in zip(leaves, _pixels_by_label(seg_map, len(leaves)))]
    logger.info(f"Segmented {len(result)} leaves from {len(slices)} slices")
    return result


def leaf_label_image(segments: Sequence[LeafSegment], shape: Tuple[int, int]) -> np.ndarray:
    """Label raster, 0 for background and k+1 for leaf k."""
    labels = np.zeros(shape, dtype=np.int32)
    for k, seg in enumerate(segments):
        labels[seg.pixels[:, 0], seg.pixels[:, 1]] = k + 1
    return labels


def leaf_table(segments: Sequence[LeafSegment], gsd: float) -> pd.DataFrame:
    rows = []
    for k, seg in enumerate(segments):
        length, width, area = leaf_metrics(seg, gsd)
        rows.append({'leaf_id': k, 'length_m': length, 'width_m': width,
                     'area_m2': area, 'n_slices': seg.n_slices})
    return pd.DataFrame(rows, columns=['leaf_id', 'length_m', 'width_m', 'area_m2', 'n_slices'])

"""Detector post-processing: turn probability/kernel/similarity maps into
scored instance polygons.

Implements the map-to-polygon halves of three segmentation detectors:
shrink-and-unclip binarization (``db``), progressive kernel expansion
(``psenet``) and similarity-vector pixel aggregation (``pan``), on top of a
shared substrate of connected-component labeling and boundary tracing.

Pixel (r, c) is modeled as the unit square [c-0.5, c+0.5] x [r-0.5, r+0.5];
boundary polygons follow the outline of the union of those squares, so every
pixel center of a region lies strictly inside its contour.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .errors import GeometryError, OcrEngineError, ShapeError
from .geometry import Polygon, clip_polygon_to_rect, convex_hull, polygon_offset

_STRUCTURE = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8),
    8: np.ones((3, 3), dtype=np.uint8),
}

# BFS claim order within one dequeued pixel: up, left, right, down.
_PSE_NEIGHBORS = ((-1, 0), (0, -1), (0, 1), (1, 0))

# Connectivity used when the algorithm does not parameterize it: blob labeling
# for binarized probability maps keeps diagonal strokes whole (8); kernel
# seed labeling for expansion/aggregation follows the stricter 4.
_DB_CONNECTIVITY = 8
_KERNEL_CONNECTIVITY = 4


def _as_binary(grid, name: str = "grid") -> NDArray[np.bool_]:
    arr = np.asarray(grid)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2D grid, got shape {arr.shape}")
    return arr != 0


def _as_prob_map(grid, name: str = "prob") -> NDArray[np.float64]:
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


@dataclass
class DetParams:
    """Post-processing thresholds shared by the detectors (overridable in config)."""

    bin_thresh: float = 0.3
    box_score_thresh: float = 0.5
    unclip_ratio: float = 1.5
    min_kernel_area: int = 4
    max_candidates: int = 1000
    pan_dist_thresh: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.bin_thresh < 1.0:
            raise ValueError(f"bin_thresh must be in (0,1), got {self.bin_thresh}")
        if not 0.0 < self.box_score_thresh < 1.0:
            raise ValueError(f"box_score_thresh must be in (0,1), got {self.box_score_thresh}")
        if self.unclip_ratio <= 0:
            raise ValueError(f"unclip_ratio must be > 0, got {self.unclip_ratio}")
        if self.min_kernel_area < 1:
            raise ValueError(f"min_kernel_area must be >= 1, got {self.min_kernel_area}")
        if self.max_candidates < 1:
            raise ValueError(f"max_candidates must be >= 1, got {self.max_candidates}")
        if self.pan_dist_thresh < 0:
            raise ValueError(f"pan_dist_thresh must be >= 0, got {self.pan_dist_thresh}")


@dataclass(frozen=True)
class Detection:
    """One detected text region: outline polygon plus mean-probability score."""

    polygon: Polygon
    score: float


class KernelStack:
    """Ordered binary kernel maps, smallest first, with monotone nesting
    enforced by intersecting each kernel with its successor."""

    def __init__(self, kernels):
        ks = [_as_binary(k, f"kernel[{i}]") for i, k in enumerate(kernels)]
        if not ks:
            raise ShapeError("kernel stack needs at least one kernel")
        shape = ks[0].shape
        for i, k in enumerate(ks):
            if k.shape != shape:
                raise ShapeError(f"kernel[{i}] shape {k.shape} != kernel[0] shape {shape}")
        for i in range(len(ks) - 2, -1, -1):
            ks[i] = ks[i] & ks[i + 1]
        self.kernels = ks

    @property
    def shape(self) -> tuple[int, int]:
        return self.kernels[0].shape

    def __len__(self) -> int:
        return len(self.kernels)


def connected_components(binary, connectivity: int = 4) -> tuple[NDArray[np.int32], int]:
    """Label foreground pixels; two pixels share a label iff they are
    connected under 4- or 8-connectivity.

    Labels 1..count are assigned by raster order of each component's first
    pixel, so the output is deterministic.
    """
    if connectivity not in _STRUCTURE:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = _as_binary(binary)
    labels, count = ndimage.label(mask, structure=_STRUCTURE[connectivity])
    labels = labels.astype(np.int32)
    if count <= 1:
        return labels, int(count)
    # Re-number by first raster occurrence; scipy's ordering is not contractual.
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    first = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, count + 1, dtype=np.int32)
    return remap[labels], int(count)


# Crack-following transitions: for travel direction d at a lattice corner,
# the two cells adjacent to the next edge (front-left, front-right).
_FL_FR = {
    (0, 1): ((-1, 0), (0, 0)),  # heading +x
    (1, 0): ((0, 0), (0, -1)),  # heading +y
    (0, -1): ((0, -1), (-1, -1)),  # heading -x
    (-1, 0): ((-1, -1), (-1, 0)),  # heading -y
}
_TURN_LEFT = {(0, 1): (-1, 0), (-1, 0): (0, -1), (0, -1): (1, 0), (1, 0): (0, 1)}
_TURN_RIGHT = {(0, 1): (1, 0), (1, 0): (0, -1), (0, -1): (-1, 0), (-1, 0): (0, 1)}


def extract_contour(labels, label: int) -> Polygon:
    """Outer boundary polygon of one labeled region, traced along pixel-square
    edges with the region kept on the right of the walk.

    Diagonal pinch corners are traversed joined, so 8-connected regions come
    back as one closed outline (touching itself at the pinch point).
    """
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ShapeError(f"label map must be 2D, got shape {lab.shape}")
    h, w = lab.shape
    region = lab == label
    seeds = np.argwhere(region)
    if len(seeds) == 0:
        raise OcrEngineError(f"label {label} not present in label map")
    r0, c0 = int(seeds[0][0]), int(seeds[0][1])

    def in_region(cell: tuple[int, int]) -> bool:
        r, c = cell
        return 0 <= r < h and 0 <= c < w and region[r, c]

    start = (r0, c0)  # corner (i, j) = top-left corner of the first pixel
    start_dir = (0, 1)
    pos, d = start, start_dir
    corners: list[tuple[int, int]] = []
    max_steps = 8 * (h + 1) * (w + 1) + 16
    for _ in range(max_steps):
        fl_off, fr_off = _FL_FR[d]
        fl = (pos[0] + fl_off[0], pos[1] + fl_off[1])
        fr = (pos[0] + fr_off[0], pos[1] + fr_off[1])
        if in_region(fl):
            d = _TURN_LEFT[d]
            corners.append(pos)
        elif in_region(fr):
            pos = (pos[0] + d[0], pos[1] + d[1])
        else:
            d = _TURN_RIGHT[d]
            corners.append(pos)
        if pos == start and d == start_dir:
            break
    else:
        raise GeometryError("contour tracing did not terminate")
    # The walk records the start corner last; rotate it to the front so the
    # vertex order is fully deterministic.
    corners = corners[-1:] + corners[:-1]
    verts = np.array([(j - 0.5, i - 0.5) for i, j in corners], dtype=np.float64)
    return Polygon(verts)


def pse_expand(stack: KernelStack, min_kernel_area: int) -> NDArray[np.int32]:
    """Progressive scale expansion: seed labels from the smallest kernel's
    components, then grow them level by level through each successive
    kernel's foreground.

    Discipline (fixed so runs are reproducible): seed components use
    4-connectivity; each level's FIFO queue is primed with all labeled pixels
    in ascending (row, col) order; a dequeued pixel claims unlabeled
    4-neighbors in up/left/right/down order; pixels are claimed by the first
    label to reach them and never relabeled.
    """
    labels, count = connected_components(stack.kernels[0], _KERNEL_CONNECTIVITY)
    if count and min_kernel_area > 1:
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        keep = sizes >= min_kernel_area
        keep[0] = False
        remap = np.zeros(count + 1, dtype=np.int32)
        remap[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
        labels = remap[labels]
    h, w = stack.shape
    for level in range(1, len(stack)):
        fg = stack.kernels[level]
        seeds = np.argwhere(labels > 0)
        queue = deque((int(r), int(c)) for r, c in seeds)
        while queue:
            r, c = queue.popleft()
            lab = labels[r, c]
            for dr, dc in _PSE_NEIGHBORS:
                nr, nc = r + dr, c + dc
                if 0 <= nr < h and 0 <= nc < w and fg[nr, nc] and labels[nr, nc] == 0:
                    labels[nr, nc] = lab
                    queue.append((nr, nc))
    return labels


def pan_aggregate(
    text_map,
    kernel_map,
    similarity,
    dist_thresh: float,
) -> NDArray[np.int32]:
    """Pixel aggregation: label kernel components, then attach each text
    foreground pixel to the kernel whose mean similarity vector is nearest
    (Euclidean), provided that distance is strictly below ``dist_thresh``.
    """
    text = _as_binary(text_map, "text_map")
    kernel = _as_binary(kernel_map, "kernel_map")
    sim = np.asarray(similarity, dtype=np.float64)
    if sim.ndim != 3:
        raise ShapeError(f"similarity must be (H, W, D), got shape {sim.shape}")
    if text.shape != kernel.shape or sim.shape[:2] != text.shape:
        raise ShapeError(
            f"shape mismatch: text {text.shape}, kernel {kernel.shape}, similarity {sim.shape}"
        )
    labels, count = connected_components(kernel, _KERNEL_CONNECTIVITY)
    if count == 0:
        return labels
    means = np.stack([sim[labels == k].mean(axis=0) for k in range(1, count + 1)])
    free = text & (labels == 0)
    coords = np.argwhere(free)
    if len(coords) == 0:
        return labels
    vectors = sim[free]  # (M, D) in raster order, same order as coords
    dists = np.linalg.norm(vectors[:, None, :] - means[None, :, :], axis=2)
    best = np.argmin(dists, axis=1)
    ok = dists[np.arange(len(coords)), best] < dist_thresh
    labels[coords[ok, 0], coords[ok, 1]] = (best[ok] + 1).astype(np.int32)
    return labels


def region_score(prob: NDArray[np.float64], contour: Polygon) -> float:
    """Mean probability over pixels whose centers fall inside the contour."""
    x0, y0, x1, y1 = contour.bounds()
    h, w = prob.shape
    cx0 = max(0, int(np.ceil(x0)))
    cx1 = min(w - 1, int(np.floor(x1)))
    cy0 = max(0, int(np.ceil(y0)))
    cy1 = min(h - 1, int(np.floor(y1)))
    if cx0 > cx1 or cy0 > cy1:
        return 0.0
    xs, ys = np.meshgrid(np.arange(cx0, cx1 + 1), np.arange(cy0, cy1 + 1))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    inside = contour.contains_points(pts)
    if not inside.any():
        return 0.0
    return float(prob[cy0 : cy1 + 1, cx0 : cx1 + 1].ravel()[inside].mean())


def _labels_to_detections(
    labels: NDArray[np.int32],
    prob: NDArray[np.float64],
    params: DetParams,
    unclip: bool,
) -> list[Detection]:
    h, w = prob.shape
    count = int(labels.max(initial=0))
    found: list[Detection] = []
    for label in range(1, count + 1):
        if not (labels == label).any():
            continue
        contour = extract_contour(labels, label)
        score = region_score(prob, contour)
        if score < params.box_score_thresh:
            continue
        poly = contour
        if unclip:
            d = contour.area * params.unclip_ratio / contour.perimeter
            try:
                poly = polygon_offset(contour, d)
            except GeometryError:
                # Concave outlines can foul a large miter offset; widen the
                # hull instead so the instance survives.
                poly = polygon_offset(convex_hull(contour.vertices), d)
        clipped = clip_polygon_to_rect(poly, -0.5, -0.5, w - 0.5, h - 0.5)
        if clipped is None:
            continue
        found.append(Detection(polygon=clipped, score=min(max(score, 0.0), 1.0)))
    found.sort(key=lambda det: -det.score)  # stable: ties keep raster order
    return found[: params.max_candidates]


def db_postprocess(prob, params: DetParams) -> list[Detection]:
    """Shrink-map post-processing: binarize the probability map, score each
    component, and reverse the training-time shrink by offsetting every
    contour outward by area * unclip_ratio / perimeter."""
    prob = _as_prob_map(prob)
    binary = prob > params.bin_thresh
    labels, _ = connected_components(binary, _DB_CONNECTIVITY)
    return _labels_to_detections(labels, prob, params, unclip=True)


def psenet_postprocess(stack: KernelStack, prob, params: DetParams) -> list[Detection]:
    """Progressive-expansion post-processing: kernels are already grown to
    full instance extent, so contours are emitted without unclipping."""
    prob = _as_prob_map(prob)
    if stack.shape != prob.shape:
        raise ShapeError(f"kernel stack {stack.shape} does not match prob map {prob.shape}")
    labels = pse_expand(stack, params.min_kernel_area)
    return _labels_to_detections(labels, prob, params, unclip=False)


def pan_postprocess(text_map, kernel_map, similarity, prob, params: DetParams) -> list[Detection]:
    """Aggregation post-processing: similarity-guided pixel assignment, then
    the shared contour/score/filter path."""
    prob = _as_prob_map(prob)
    labels = pan_aggregate(text_map, kernel_map, similarity, params.pan_dist_thresh)
    if labels.shape != prob.shape:
        raise ShapeError(f"maps {labels.shape} do not match prob map {prob.shape}")
    return _labels_to_detections(labels, prob, params, unclip=False)

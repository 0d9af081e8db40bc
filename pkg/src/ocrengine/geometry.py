"""Pixel-space geometric primitives: polygons, rotated boxes, and the exact
algorithms (clipping, offsetting, rotating calipers) used by detection
post-processing and evaluation.

Coordinate convention: x grows to the right (columns), y grows downward
(rows).  Orientation is defined by the shoelace sign treating (x, y) as
Cartesian; polygons are normalized so their signed area is positive
("counter-clockwise" in that sense) at construction time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import GeometryError

# Tolerance for point equality and degeneracy tests, in pixels.
EPS = 1e-6

MITER_LIMIT = 2.0


def as_point_array(points) -> NDArray[np.float64]:
    """Validate and convert a sequence of (x, y) pairs to an (N, 2) array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError(f"expected (N, 2) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("points contain NaN or Inf")
    return pts


def _signed_area(verts: NDArray[np.float64]) -> float:
    x = verts[:, 0]
    y = verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    """True when open segment interiors intersect, or the segments overlap
    collinearly over more than a point.  Shared endpoints do not count."""
    d1 = p2 - p1
    d2 = q2 - q1
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    r = q1 - p1
    if abs(denom) > EPS:
        t = (r[0] * d2[1] - r[1] * d2[0]) / denom
        u = (r[0] * d1[1] - r[1] * d1[0]) / denom
        return EPS < t < 1.0 - EPS and EPS < u < 1.0 - EPS
    # Parallel: check collinear overlap of positive length.
    if abs(r[0] * d1[1] - r[1] * d1[0]) > EPS:
        return False
    L2 = float(d1 @ d1)
    if L2 <= EPS * EPS:
        return False
    t0 = float((q1 - p1) @ d1) / L2
    t1 = float((q2 - p1) @ d1) / L2
    lo, hi = min(t0, t1), max(t0, t1)
    return min(hi, 1.0) - max(lo, 0.0) > EPS


class Polygon:
    """A simple polygon with at least 3 vertices and positive area.

    Vertex order is normalized at construction so that the shoelace sum is
    positive; consecutive duplicate vertices are merged.  Edges may touch at
    shared endpoints but never cross; instances are immutable.
    """

    __slots__ = ("_verts",)

    def __init__(self, vertices):
        verts = as_point_array(vertices)
        if len(verts) >= 2:
            keep = np.linalg.norm(verts - np.roll(verts, 1, axis=0), axis=1) > EPS
            if keep.any():
                verts = verts[keep]
        if len(verts) < 3:
            raise GeometryError("polygon needs at least 3 distinct vertices")
        area2 = _signed_area(verts)
        if abs(area2) <= EPS:
            raise GeometryError("degenerate polygon: zero area (collinear vertices)")
        if area2 < 0:
            # Reverse orientation but keep the original first vertex first.
            verts = np.roll(verts[::-1], 1, axis=0)
        self._check_simple(verts)
        verts.setflags(write=False)
        self._verts = verts

    @staticmethod
    def _check_simple(verts: NDArray[np.float64]) -> None:
        n = len(verts)
        for i in range(n):
            p1, p2 = verts[i], verts[(i + 1) % n]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or (i + 1) % n == j:
                    continue
                if _segments_cross(p1, p2, verts[j], verts[(j + 1) % n]):
                    raise GeometryError("polygon is self-intersecting")

    @property
    def vertices(self) -> NDArray[np.float64]:
        return self._verts

    def __len__(self) -> int:
        return len(self._verts)

    def __repr__(self) -> str:
        return f"Polygon({self._verts.tolist()!r})"

    @property
    def area(self) -> float:
        return _signed_area(self._verts)

    @property
    def perimeter(self) -> float:
        d = np.roll(self._verts, -1, axis=0) - self._verts
        return float(np.sum(np.linalg.norm(d, axis=1)))

    @property
    def is_convex(self) -> bool:
        v = self._verts
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        return bool(np.all(cross >= -EPS))

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)."""
        mn = self._verts.min(axis=0)
        mx = self._verts.max(axis=0)
        return float(mn[0]), float(mn[1]), float(mx[0]), float(mx[1])

    def contains_points(self, points) -> NDArray[np.bool_]:
        """Even-odd test for an array of (x, y) points.  Points exactly on the
        boundary may land on either side within floating-point rounding."""
        pts = as_point_array(points)
        px, py = pts[:, 0], pts[:, 1]
        inside = np.zeros(len(pts), dtype=bool)
        v = self._verts
        n = len(v)
        for i in range(n):
            x1, y1 = v[i]
            x2, y2 = v[(i + 1) % n]
            straddles = (y1 > py) != (y2 > py)
            if not straddles.any():
                continue
            xcross = (x2 - x1) * (py - y1) / (y2 - y1) + x1
            inside ^= straddles & (px < xcross)
        return inside

    def translated(self, dx: float, dy: float) -> "Polygon":
        return Polygon(self._verts + np.array([dx, dy]))


@dataclass(frozen=True)
class RotatedBox:
    """A rectangle described by center, side lengths and rotation angle
    (radians, canonicalized to [0, pi/2) by construction in min_area_rect)."""

    cx: float
    cy: float
    width: float
    height: float
    angle: float

    def to_polygon(self) -> Polygon:
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw, hh = self.width / 2.0, self.height / 2.0
        corners = np.array([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])
        rot = np.array([[c, -s], [s, c]])
        return Polygon(corners @ rot.T + np.array([self.cx, self.cy]))

    def corner_points(self) -> NDArray[np.float64]:
        """The 4 corners without Polygon validation (usable when degenerate)."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw, hh = self.width / 2.0, self.height / 2.0
        corners = np.array([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + np.array([self.cx, self.cy])


def polygon_area(p: Polygon) -> float:
    """Positive area in pixels^2 (shoelace)."""
    return p.area


def _clip_convex(subject: NDArray[np.float64], clip: NDArray[np.float64]) -> NDArray[np.float64]:
    """Sutherland-Hodgman clip of `subject` against convex CCW `clip`.
    Returns raw vertices; may be empty or degenerate (zero area)."""
    output = subject
    n = len(clip)
    for i in range(n):
        if len(output) == 0:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        # For CCW-by-shoelace clip polygons the interior half-plane of edge
        # a->b is where cross(edge, p - a) >= 0.
        d = edge[0] * (output[:, 1] - a[1]) - edge[1] * (output[:, 0] - a[0])
        inside = d >= -EPS
        result = []
        m = len(output)
        for j in range(m):
            cur, nxt = output[j], output[(j + 1) % m]
            if inside[j]:
                result.append(cur)
            if inside[j] != inside[(j + 1) % m]:
                dcur, dnxt = d[j], d[(j + 1) % m]
                t = dcur / (dcur - dnxt)
                result.append(cur + t * (nxt - cur))
        output = np.array(result) if result else np.empty((0, 2))
    return output


def _raw_area(verts: NDArray[np.float64]) -> float:
    if len(verts) < 3:
        return 0.0
    return abs(_signed_area(verts))


def triangulate(p: Polygon) -> list[NDArray[np.float64]]:
    """Ear-clipping triangulation of a simple CCW polygon.  Returns a list of
    (3, 2) vertex arrays partitioning the polygon."""
    verts = [v for v in p.vertices]
    tris: list[NDArray[np.float64]] = []
    guard = 0
    max_iter = 2 * len(verts) ** 2 + 16
    while len(verts) > 3:
        guard += 1
        if guard > max_iter:
            raise GeometryError("ear clipping failed to terminate (degenerate polygon?)")
        n = len(verts)
        clipped = False
        for i in range(n):
            a, b, c = verts[(i - 1) % n], verts[i], verts[(i + 1) % n]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross < -EPS:
                continue  # reflex corner
            if cross <= EPS:
                # Collinear ear contributes no area; drop the middle vertex.
                del verts[i]
                clipped = True
                break
            if any(
                _point_in_triangle(verts[k], a, b, c)
                for k in range(n)
                if k not in ((i - 1) % n, i, (i + 1) % n)
            ):
                continue
            tris.append(np.array([a, b, c]))
            del verts[i]
            clipped = True
            break
        if not clipped:
            raise GeometryError("ear clipping found no ear (polygon not simple?)")
    if len(verts) == 3:
        tri = np.array(verts)
        if _raw_area(tri) > EPS:
            tris.append(tri)
    return tris


def _point_in_triangle(pt, a, b, c) -> bool:
    d1 = (pt[0] - a[0]) * (b[1] - a[1]) - (pt[1] - a[1]) * (b[0] - a[0])
    d2 = (pt[0] - b[0]) * (c[1] - b[1]) - (pt[1] - b[1]) * (c[0] - b[0])
    d3 = (pt[0] - c[0]) * (a[1] - c[1]) - (pt[1] - c[1]) * (a[0] - c[0])
    return d1 <= -EPS and d2 <= -EPS and d3 <= -EPS or d1 >= EPS and d2 >= EPS and d3 >= EPS


def polygon_intersection_area(a: Polygon, b: Polygon) -> float:
    """Area of the intersection of two simple polygons.

    Convex pairs are clipped exactly (Sutherland-Hodgman); non-convex inputs
    are decomposed into triangles and pairwise intersections summed.
    """
    ax0, ay0, ax1, ay1 = a.bounds()
    bx0, by0, bx1, by1 = b.bounds()
    if ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0:
        return 0.0
    if a.is_convex and b.is_convex:
        return _raw_area(_clip_convex(a.vertices, b.vertices))
    tris_a = [a.vertices] if a.is_convex else triangulate(a)
    tris_b = [b.vertices] if b.is_convex else triangulate(b)
    total = 0.0
    for ta in tris_a:
        for tb in tris_b:
            total += _raw_area(_clip_convex(ta, tb))
    return total


def polygon_iou(a: Polygon, b: Polygon) -> float:
    """Intersection over union, in [0, 1]."""
    inter = polygon_intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= EPS:
        raise GeometryError("IoU undefined: union area is zero")
    return min(max(inter / union, 0.0), 1.0)


def polygon_offset(p: Polygon, d: float) -> Polygon:
    """Displace every edge outward by `d` pixels along its normal (inward for
    negative `d`).  Joins are mitered up to ratio 2, beveled beyond that.

    Raises GeometryError when the offset collapses the polygon.
    """
    if d == 0:
        return Polygon(p.vertices)
    verts = p.vertices
    n = len(verts)
    edges = np.roll(verts, -1, axis=0) - verts
    lengths = np.linalg.norm(edges, axis=1)
    if np.any(lengths <= EPS):
        raise GeometryError("zero-length edge")
    # Outward unit normal of each edge for a CCW-by-shoelace polygon.
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1) / lengths[:, None]
    out: list[NDArray[np.float64]] = []
    firsts: list[NDArray[np.float64]] = []
    lasts: list[NDArray[np.float64]] = []
    for i in range(n):
        v = verts[i]
        n_prev = normals[(i - 1) % n]
        n_next = normals[i]
        c = float(n_prev @ n_next)
        if 1.0 + c <= EPS or math.sqrt(2.0 / (1.0 + c)) > MITER_LIMIT:
            # Reversing or too-sharp corner: bevel instead of mitering.
            pts = [v + n_prev * d, v + n_next * d]
        else:
            pts = [v + (d / (1.0 + c)) * (n_prev + n_next)]
        firsts.append(pts[0])
        lasts.append(pts[-1])
        out.extend(pts)
    # Collapse detection: every displaced edge must keep its direction.  The
    # signed-area test alone misses centrally-symmetric flips (a point
    # reflection preserves orientation).
    for i in range(n):
        new_edge = firsts[(i + 1) % n] - lasts[i]
        if float(new_edge @ edges[i]) < -EPS * lengths[i]:
            raise GeometryError(f"offset by {d} collapsed the polygon")
    raw = np.array(out)
    if _signed_area(raw) <= EPS:
        raise GeometryError(f"offset by {d} collapsed the polygon")
    try:
        return Polygon(raw)
    except GeometryError as exc:
        raise GeometryError(f"offset by {d} produced a degenerate polygon: {exc}") from exc


def convex_hull(points) -> Polygon:
    """Convex hull (monotone chain), counter-clockwise, collinear points dropped."""
    pts = as_point_array(points)
    if len(pts) < 3:
        raise GeometryError("convex hull needs at least 3 points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.abs(np.diff(pts, axis=0)) > EPS, axis=1)
    pts = pts[keep]

    def build(seq):
        chain: list[np.ndarray] = []
        for pt in seq:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                if (a[0] - o[0]) * (pt[1] - o[1]) - (a[1] - o[1]) * (pt[0] - o[0]) <= EPS:
                    chain.pop()
                else:
                    break
            chain.append(pt)
        return chain

    lower = build(pts)
    upper = build(pts[::-1])
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise GeometryError("all points are collinear")
    # Monotone chain with this turn test yields clockwise-by-shoelace order in
    # (x right, y down); the Polygon constructor normalizes it.
    return Polygon(np.array(hull))


def min_area_rect(points) -> RotatedBox:
    """Smallest-area enclosing rotated rectangle via rotating calipers.

    The optimal rectangle shares an edge direction with the convex hull; the
    angle is canonicalized to [0, pi/2) by swapping width/height as needed.
    """
    hull = convex_hull(points).vertices
    edges = np.roll(hull, -1, axis=0) - hull
    best = None
    for e in edges:
        L = math.hypot(e[0], e[1])
        ux, uy = e[0] / L, e[1] / L
        proj_u = hull @ np.array([ux, uy])
        proj_v = hull @ np.array([-uy, ux])
        umin, umax = float(proj_u.min()), float(proj_u.max())
        vmin, vmax = float(proj_v.min()), float(proj_v.max())
        area = (umax - umin) * (vmax - vmin)
        if best is None or area < best[0] - EPS:
            best = (area, ux, uy, umin, umax, vmin, vmax)
    assert best is not None
    _, ux, uy, umin, umax, vmin, vmax = best
    cu, cv = (umin + umax) / 2.0, (vmin + vmax) / 2.0
    cx = cu * ux - cv * uy
    cy = cu * uy + cv * ux
    w, h = umax - umin, vmax - vmin
    theta = math.atan2(uy, ux)
    m = theta % (math.pi / 2.0)
    quarter_turns = round((theta - m) / (math.pi / 2.0))
    if m >= math.pi / 2.0:  # guard against fp landing exactly on the modulus
        m -= math.pi / 2.0
        quarter_turns += 1
    if quarter_turns % 2 != 0:
        w, h = h, w
    return RotatedBox(cx=float(cx), cy=float(cy), width=float(w), height=float(h), angle=float(m))


def clip_polygon_to_rect(p: Polygon, x0: float, y0: float, x1: float, y1: float) -> Polygon | None:
    """Intersect a polygon with an axis-aligned rectangle.

    Returns None when nothing of positive area remains.  Non-convex subjects
    whose clipped outline degenerates fall back to the convex hull of the
    clipped vertices.
    """
    bx0, by0, bx1, by1 = p.bounds()
    if bx0 >= x0 - EPS and by0 >= y0 - EPS and bx1 <= x1 + EPS and by1 <= y1 + EPS:
        return p
    rect = np.array([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], dtype=np.float64)
    if _signed_area(rect) < 0:
        rect = rect[::-1]
    clipped = _clip_convex(p.vertices, rect)
    if _raw_area(clipped) <= EPS:
        return None
    try:
        return Polygon(clipped)
    except GeometryError:
        return convex_hull(clipped)

"""Oriented rectangles, four-vertex quads and overlap measures.

Angle convention: ``theta`` is the angle in degrees between a box's
lengthwise (long, ``h``) axis and the +x axis, measured with the standard
rotation matrix in (x, y) coordinates, i.e. the long axis points along
``(cos theta, sin theta)``.  With y pointing up this is counter-clockwise;
on a y-down image display it appears clockwise.  Canonical boxes satisfy
``0 < w <= h`` and ``-90 < theta <= 90``; squares take the axis whose angle
lies in ``(0, 90]``.

Quads store the four vertices in collated order: derotate by the lengthwise
angle, split the vertices into the two rows with smallest and largest y, and
read each row by increasing x (top-left, top-right, bottom-left,
bottom-right).  Array helpers use the ``(x1, x2, x3, x4, y1, y2, y3, y4)``
layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SQUARE_RTOL = 1e-9
RECT_TOL = 1e-6


class GeometryError(ValueError):
    """Base class for geometric input errors."""


class InvalidBoxError(GeometryError):
    pass


class ShapeError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


def wrap_angle(theta: float) -> float:
    """Reduce an angle in degrees to the half-open range (-90, 90]."""
    t = math.fmod(theta, 180.0)
    if t <= -90.0:
        t += 180.0
    elif t > 90.0:
        t -= 180.0
    return t


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    t = np.mod(np.asarray(theta, dtype=float), 180.0)
    return np.where(t > 90.0, t - 180.0, t)


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box {vals}")
        if not (self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"side lengths must be positive, got w={self.w}, h={self.h}")
        if self.w > self.h:
            raise InvalidBoxError("canonical boxes need w <= h; use canonicalize()")
        if not (-90.0 < self.theta <= 90.0):
            raise InvalidBoxError(f"theta={self.theta} outside (-90, 90]")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    def to_json(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "theta_deg": self.theta}

    @classmethod
    def from_json(cls, obj: dict) -> "RotatedBox":
        return canonicalize((obj["cx"], obj["cy"], obj["w"], obj["h"], obj["theta_deg"]))


@dataclass(frozen=True)
class QuadBox:
    xs: tuple[float, float, float, float]
    ys: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.xs) != 4 or len(self.ys) != 4:
            raise ShapeError("a quad has exactly four vertices")
        if not all(math.isfinite(v) for v in (*self.xs, *self.ys)):
            raise ShapeError("non-finite quad vertex")

    @property
    def vertices(self) -> np.ndarray:
        return np.column_stack([self.xs, self.ys]).astype(float)

    def as_array(self) -> np.ndarray:
        return np.array([*self.xs, *self.ys], dtype=float)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "QuadBox":
        a = [float(v) for v in arr]
        return cls(tuple(a[:4]), tuple(a[4:]))

    @classmethod
    def from_points(cls, pts: Iterable[Sequence[float]]) -> "QuadBox":
        p = np.asarray(list(pts), dtype=float)
        return cls(tuple(p[:, 0].tolist()), tuple(p[:, 1].tolist()))

    def to_json(self) -> dict:
        return {"xs": list(self.xs), "ys": list(self.ys)}

    @classmethod
    def from_json(cls, obj: dict) -> "QuadBox":
        return cls(tuple(float(v) for v in obj["xs"]), tuple(float(v) for v in obj["ys"]))


@dataclass(frozen=True)
class AxisBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise InvalidBoxError(f"empty axis box {self}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


def _canonical_parts(cx, cy, w, h, theta, square_rtol=0.0):
    if not all(math.isfinite(v) for v in (cx, cy, w, h, theta)):
        raise InvalidBoxError("non-finite box parameters")
    if w <= 0 or h <= 0:
        raise InvalidBoxError(f"side lengths must be positive, got w={w}, h={h}")
    if abs(w - h) <= square_rtol * max(w, h):
        s = 0.5 * (w + h)
        w = h = s
    if w > h:
        w, h = h, w
        theta = theta + 90.0
    theta = wrap_angle(theta)
    if w == h and theta <= 0.0:
        theta = wrap_angle(theta + 90.0)
    return float(cx), float(cy), float(w), float(h), float(theta)


def canonicalize(box: Sequence[float]) -> RotatedBox:
    """Canonical form of a raw ``(cx, cy, w, h, theta)`` tuple.

    ``theta`` in the raw tuple is the direction of the ``h`` side; when the
    sides are swapped the lengthwise axis turns by 90 degrees.
    """
    cx, cy, w, h, theta = (float(v) for v in box)
    return RotatedBox(*_canonical_parts(cx, cy, w, h, theta))


def canonicalize_array(boxes: np.ndarray) -> np.ndarray:
    """Vectorised :func:`canonicalize` over an ``(N, 5)`` array."""
    b = np.array(boxes, dtype=float, copy=True).reshape(-1, 5)
    if np.any(b[:, 2] <= 0) or np.any(b[:, 3] <= 0):
        raise InvalidBoxError("side lengths must be positive")
    swap = b[:, 2] > b[:, 3]
    w = np.where(swap, b[:, 3], b[:, 2])
    h = np.where(swap, b[:, 2], b[:, 3])
    t = wrap_angles(b[:, 4] + np.where(swap, 90.0, 0.0))
    t = np.where((w == h) & (t <= 0.0), wrap_angles(t + 90.0), t)
    b[:, 2], b[:, 3], b[:, 4] = w, h, t
    return b


def boxes_to_array(boxes: Iterable[RotatedBox]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=float).reshape(-1, 5)


def array_to_boxes(arr: np.ndarray) -> list[RotatedBox]:
    return [RotatedBox(*map(float, row)) for row in np.asarray(arr).reshape(-1, 5)]


# -- vertex forms ----------------------------------------------------------

_SX = np.array([-1.0, 1.0, -1.0, 1.0])
_SY = np.array([-1.0, -1.0, 1.0, 1.0])
# polygon traversal of the collated vertex order (counter-clockwise)
POLY_ORDER = [0, 1, 3, 2]


def quads_from_array(boxes: np.ndarray) -> np.ndarray:
    """Collated ``(N, 8)`` vertex arrays for an ``(N, 5)`` box array."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    t = np.radians(b[:, 4])[:, None]
    c, s = np.cos(t), np.sin(t)
    a = _SX[None, :] * b[:, 3:4] / 2.0  # along the long axis
    n = _SY[None, :] * b[:, 2:3] / 2.0  # along the short axis
    xs = b[:, 0:1] + a * c - n * s
    ys = b[:, 1:2] + a * s + n * c
    return np.hstack([xs, ys])


def to_quad(box: RotatedBox) -> QuadBox:
    return QuadBox.from_array(quads_from_array(np.array(box.as_tuple()))[0])


def collate_vertices(pts: np.ndarray, theta: float) -> np.ndarray:
    """Order four points by the collation rule given the lengthwise angle.

    Returns the ``(4, 2)`` reordered points.
    """
    pts = np.asarray(pts, dtype=float).reshape(4, 2)
    c = pts.mean(axis=0)
    t = math.radians(theta)
    ct, st = math.cos(t), math.sin(t)
    d = pts - c
    lx = d[:, 0] * ct + d[:, 1] * st
    ly = -d[:, 0] * st + d[:, 1] * ct
    rows = np.argsort(ly, kind="stable")
    top = sorted(rows[:2], key=lambda k: (lx[k], k))
    bottom = sorted(rows[2:], key=lambda k: (lx[k], k))
    return pts[top + bottom]


def canonicalize_quad(quad: QuadBox) -> QuadBox:
    """Re-collate a (possibly irregular) quad.

    The lengthwise angle is that of the quad's minimum-area enclosing
    rectangle, so any permutation of a rectangle's vertices collates the same.
    """
    return QuadBox.from_array(collate_quads(quad.as_array())[0])


def collate_quads(quads: np.ndarray, thetas: np.ndarray | None = None) -> np.ndarray:
    """Vectorised collation of ``(N, 8)`` quads.

    ``thetas`` default to the lengthwise angle of each quad's minimum-area
    rectangle.
    """
    q = np.asarray(quads, dtype=float).reshape(-1, 8)
    if thetas is None:
        thetas = min_area_rect_quads(q)[:, 4]
    pts = np.stack([q[:, :4], q[:, 4:]], axis=-1)  # (N, 4, 2)
    c = pts.mean(axis=1, keepdims=True)
    t = np.radians(np.asarray(thetas, dtype=float))[:, None]
    d = pts - c
    lx = d[..., 0] * np.cos(t) + d[..., 1] * np.sin(t)
    ly = -d[..., 0] * np.sin(t) + d[..., 1] * np.cos(t)
    rows = np.argsort(ly, axis=1, kind="stable")
    top, bottom = rows[:, :2], rows[:, 2:]
    idx = np.arange(len(q))[:, None]
    top = np.take_along_axis(top, np.argsort(lx[idx, top], axis=1, kind="stable"), axis=1)
    bottom = np.take_along_axis(bottom, np.argsort(lx[idx, bottom], axis=1, kind="stable"), axis=1)
    order = np.hstack([top, bottom])
    out = pts[idx, order]
    return np.hstack([out[..., 0], out[..., 1]])


def from_quad(quad: QuadBox, tol: float = RECT_TOL) -> RotatedBox:
    """Inverse of :func:`to_quad` for rectangular quads.

    Raises :class:`ShapeError` when the vertices are not a rectangle within
    ``tol`` pixels; irregular quads go through :func:`min_area_rect`.
    """
    pts = quad.vertices
    try:
        box = min_area_rect(pts)
    except DegenerateGeometryError as exc:
        raise ShapeError("quad is degenerate") from exc
    corners = to_quad(box).vertices
    # every input vertex must coincide with a distinct rectangle corner
    dist = np.linalg.norm(pts[:, None, :] - corners[None, :, :], axis=-1)
    nearest = dist.argmin(axis=1)
    if len(set(nearest.tolist())) != 4 or dist.min(axis=1).max() > tol:
        raise ShapeError("quad is not a rectangle; use min_area_rect()")
    return box


# -- convex hull and rotating calipers -------------------------------------

def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull by Andrew's monotone chain, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).reshape(-1, 2).tolist())))
    if len(pts) < 3:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def _rect_from_frame(origin, e, emin, emax, hmax) -> RotatedBox:
    n = np.array([-e[1], e[0]])
    center = origin + e * (emin + emax) / 2.0 + n * hmax / 2.0
    le, ln = emax - emin, hmax
    if le >= ln:
        theta = math.degrees(math.atan2(e[1], e[0]))
        w, h = ln, le
    else:
        theta = math.degrees(math.atan2(n[1], n[0]))
        w, h = le, ln
    return RotatedBox(*_canonical_parts(center[0], center[1], w, h, theta, SQUARE_RTOL))


def min_area_rect(points) -> RotatedBox:
    """Minimum-area enclosing rectangle by rotating calipers.

    One side of the optimal rectangle is flush with a hull edge; the three
    supporting vertices (farthest forward, farthest from the edge, farthest
    back) advance monotonically around the hull, so the sweep is linear in
    the hull size.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateGeometryError("need at least three points")
    hull = convex_hull(pts)
    m = len(hull)
    if m < 3:
        raise DegenerateGeometryError("points are collinear or coincident")
    scale = float(np.abs(hull - hull.mean(axis=0)).max())
    eps = 1e-12 * max(scale, 1.0)

    best = None
    j = k = l = None
    for i in range(m):
        p0, p1 = hull[i], hull[(i + 1) % m]
        edge = p1 - p0
        e = edge / math.hypot(edge[0], edge[1])
        n = np.array([-e[1], e[0]])  # inward for a counter-clockwise hull
        if j is None:
            j = (i + 1) % m
        for _ in range(m):
            nxt = (j + 1) % m
            if np.dot(hull[nxt] - hull[j], e) > eps:
                j = nxt
            else:
                break
        if k is None:
            k = j
        for _ in range(m):
            nxt = (k + 1) % m
            if np.dot(hull[nxt] - hull[k], n) > eps:
                k = nxt
            else:
                break
        if l is None:
            l = k
        for _ in range(m):
            nxt = (l + 1) % m
            if np.dot(hull[nxt] - hull[l], e) < -eps:
                l = nxt
            else:
                break
        emax = float(np.dot(hull[j] - p0, e))
        emin = float(np.dot(hull[l] - p0, e))
        hmax = float(np.dot(hull[k] - p0, n))
        area = (emax - emin) * hmax
        if best is None or area < best[0]:
            best = (area, p0, e, emin, emax, hmax)
    area, p0, e, emin, emax, hmax = best
    if area <= 0:
        raise DegenerateGeometryError("zero-area hull")
    return _rect_from_frame(p0, e, emin, emax, hmax)


_PAIRS = [(a, b) for a in range(4) for b in range(a + 1, 4)]


def min_area_rect_quads(quads: np.ndarray) -> np.ndarray:
    """Minimum-area rectangles of many 4-point sets at once, as ``(N, 5)``.

    Every hull edge of four points joins some pair of them, so trying the six
    pair directions covers all caliper positions.  Degenerate inputs come out
    with a zero side; callers filter them.
    """
    q = np.asarray(quads, dtype=float).reshape(-1, 8)
    pts = np.stack([q[:, :4], q[:, 4:]], axis=-1)
    n = len(q)
    best_area = np.full(n, np.inf)
    out = np.zeros((n, 5))
    for a, b in _PAIRS:
        d = pts[:, b] - pts[:, a]
        norm = np.hypot(d[:, 0], d[:, 1])
        ok = norm > 0
        e = np.where(ok[:, None], d / np.where(ok, norm, 1.0)[:, None], [1.0, 0.0])
        nn = np.stack([-e[:, 1], e[:, 0]], axis=1)
        pe = np.einsum("npk,nk->np", pts, e)
        pn = np.einsum("npk,nk->np", pts, nn)
        le = pe.max(1) - pe.min(1)
        ln = pn.max(1) - pn.min(1)
        area = le * ln
        finite = np.isfinite(best_area)
        tol = 1e-12 * np.maximum(np.where(finite, best_area, 1.0), 1.0)
        better = ~finite | (area < np.where(finite, best_area, 0.0) - tol)
        if not better.any():
            continue
        best_area = np.where(better, area, best_area)
        mid_e = (pe.max(1) + pe.min(1)) / 2.0
        mid_n = (pn.max(1) + pn.min(1)) / 2.0
        cx = e[:, 0] * mid_e + nn[:, 0] * mid_n
        cy = e[:, 1] * mid_e + nn[:, 1] * mid_n
        long_e = le >= ln
        th = np.where(long_e, np.arctan2(e[:, 1], e[:, 0]), np.arctan2(nn[:, 1], nn[:, 0]))
        w = np.where(long_e, ln, le)
        h = np.where(long_e, le, ln)
        cand = np.stack([cx, cy, w, h, np.degrees(th)], axis=1)
        out[better] = cand[better]
    square = np.abs(out[:, 2] - out[:, 3]) <= SQUARE_RTOL * np.maximum(out[:, 3], 1e-300)
    s = 0.5 * (out[:, 2] + out[:, 3])
    out[:, 2] = np.where(square, s, out[:, 2])
    out[:, 3] = np.where(square, s, out[:, 3])
    out[:, 4] = wrap_angles(out[:, 4])
    flip = square & (out[:, 4] <= 0.0)
    out[:, 4] = np.where(flip, wrap_angles(out[:, 4] + 90.0), out[:, 4])
    return out


# -- overlap measures --------------------------------------------------------

def aabb_array(boxes: np.ndarray) -> np.ndarray:
    """Axis-aligned extents ``(N, 4)`` = (xmin, ymin, xmax, ymax)."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    t = np.radians(b[:, 4])
    c, s = np.abs(np.cos(t)), np.abs(np.sin(t))
    half_x = (b[:, 3] * c + b[:, 2] * s) / 2.0
    half_y = (b[:, 3] * s + b[:, 2] * c) / 2.0
    return np.stack([b[:, 0] - half_x, b[:, 1] - half_y, b[:, 0] + half_x, b[:, 1] + half_y], axis=1)


def aabb(box: RotatedBox) -> AxisBox:
    return AxisBox(*aabb_array(np.array(box.as_tuple()))[0].tolist())


def axis_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of axis-aligned extents, ``(N, 4)`` x ``(M, 4)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou_axis_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise axis-converted IoU between two ``(N, 5)`` / ``(M, 5)`` box arrays."""
    return axis_iou_matrix(aabb_array(a), aabb_array(b))


def iou_axis(a: RotatedBox, b: RotatedBox) -> float:
    return float(iou_axis_matrix(np.array(a.as_tuple()), np.array(b.as_tuple()))[0, 0])


def polygon_area(poly) -> float:
    """Shoelace area (positive for counter-clockwise vertex order)."""
    p = np.asarray(poly, dtype=float).reshape(-1, 2)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: list, clipper: list) -> list:
    """Sutherland-Hodgman clip of ``subject`` by a counter-clockwise convex ``clipper``."""
    output = list(subject)
    n = len(clipper)
    for idx in range(n):
        if not output:
            break
        ax, ay = clipper[idx]
        bx, by = clipper[(idx + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, output = output, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        s = inp[-1]
        ds = side(s)
        for e in inp:
            de = side(e)
            if de >= 0:
                if ds < 0:
                    t = ds / (ds - de)
                    output.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
                output.append(e)
            elif ds >= 0:
                t = ds / (ds - de)
                output.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
            s, ds = e, de
    return output


def _polygon(row: np.ndarray) -> list:
    q = quads_from_array(row)[0]
    return [(q[i], q[4 + i]) for i in POLY_ORDER]


def _rotated_iou_rows(a: np.ndarray, b: np.ndarray) -> float:
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    # disjoint circumcircles cannot overlap
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_convex(_polygon(a), _polygon(b)))
    inter = min(max(inter, 0.0), area_a, area_b)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou_rotated(a: RotatedBox, b: RotatedBox) -> float:
    """Exact overlap ratio of two oriented rectangles (clipping + shoelace)."""
    return _rotated_iou_rows(np.array(a.as_tuple()), np.array(b.as_tuple()))


def iou_rotated_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 5)
    b = np.asarray(b, dtype=float).reshape(-1, 5)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    # only pairs whose axis extents touch need clipping
    touch = axis_iou_matrix(aabb_array(a), aabb_array(b)) > 0
    for i, j in zip(*np.nonzero(touch)):
        out[i, j] = _rotated_iou_rows(a[i], b[j])
    return out


def nms_rotated_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    ext = aabb_array(boxes)
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        if len(rest) == 0:
            continue
        touch = axis_iou_matrix(ext[i:i + 1], ext[rest])[0] > 0
        for r in rest[touch]:
            if _rotated_iou_rows(boxes[i], boxes[r]) >= iou_threshold:
                alive[r] = False
    return np.array(keep, dtype=int)


def nms_rotated(dets: Sequence[tuple[RotatedBox, float]], iou_threshold: float) -> list[tuple[RotatedBox, float]]:
    """Greedy non-maximum suppression over ``(box, score)`` pairs."""
    if not dets:
        return []
    boxes = boxes_to_array([d[0] for d in dets])
    scores = np.array([d[1] for d in dets], dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return [dets[i] for i in nms_rotated_array(boxes, scores, iou_threshold)]

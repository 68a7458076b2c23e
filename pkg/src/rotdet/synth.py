"""Synthetic scenes, detections and sequences.

All randomness comes from numpy's PCG64 generator seeded from
``(spec.seed, scene_index)``, so outputs are reproducible across runs and
platforms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import aabb_array, canonicalize_array, iou_rotated_matrix


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 128
    count: tuple[int, int] = (1, 5)
    w_range: tuple[float, float] = (14.0, 22.0)
    h_range: tuple[float, float] = (28.0, 44.0)
    angle_range: tuple[float, float] = (-90.0, 90.0)
    center_sigma: float = 1.0
    size_sigma: float = 0.5
    angle_sigma: float = 3.0
    drop_rate: float = 0.0
    clutter_rate: float = 0.0
    feature_stride: int = 4
    feature_noise: float = 0.1
    core_scale: float = 0.5
    max_overlap: float = 0.1
    speed_range: tuple[float, float] = (0.5, 2.0)
    max_retries: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.count = tuple(int(c) for c in self.count)
        self.w_range = tuple(float(v) for v in self.w_range)
        self.h_range = tuple(float(v) for v in self.h_range)
        self.angle_range = tuple(float(v) for v in self.angle_range)
        self.speed_range = tuple(float(v) for v in self.speed_range)
        if self.width <= 0 or self.height <= 0 or self.feature_stride <= 0:
            raise ValueError("image size and stride must be positive")
        if self.width % self.feature_stride or self.height % self.feature_stride:
            raise ValueError("image size must be a multiple of the feature stride")
        if not 0 <= self.count[0] <= self.count[1]:
            raise ValueError("count range must satisfy 0 <= lo <= hi")
        for lo, hi in (self.w_range, self.h_range):
            if not 0 < lo <= hi:
                raise ValueError("size ranges must be positive and ordered")
        for name in ("drop_rate", "clutter_rate", "max_overlap"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("center_sigma", "size_sigma", "angle_sigma", "feature_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def grid_w(self) -> int:
        return self.width // self.feature_stride

    @property
    def grid_h(self) -> int:
        return self.height // self.feature_stride

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls(**json.loads(text))


@dataclass
class Scene:
    gts: np.ndarray  # (N, 5) canonical boxes, image pixels
    features: np.ndarray  # (2, grid_h, grid_w) float32
    index: int = 0


@dataclass
class Frame:
    index: int
    gts: np.ndarray
    dets: np.ndarray  # (M, 5)
    scores: np.ndarray
    is_clutter: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def scene_rng(spec: SceneSpec, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def _draw_box(spec: SceneSpec, rng: np.random.Generator):
    w = rng.uniform(*spec.w_range)
    h = rng.uniform(*spec.h_range)
    lo, hi = spec.angle_range
    # uniform on the half-open interval (lo, hi]
    theta = hi - rng.uniform(0.0, hi - lo)
    return w, h, theta


def _half_extent(w, h, theta):
    t = np.radians(theta)
    c, s = abs(np.cos(t)), abs(np.sin(t))
    return (h * c + w * s) / 2, (h * s + w * c) / 2


def place_boxes(spec: SceneSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` boxes fully inside the image with pairwise rotated IoU
    below ``spec.max_overlap``."""
    boxes = np.zeros((0, 5))
    tries = 0
    while len(boxes) < n:
        tries += 1
        if tries > spec.max_retries:
            raise PlacementError(f"placed {len(boxes)} of {n} boxes in {spec.max_retries} tries")
        w, h, theta = _draw_box(spec, rng)
        ex, ey = _half_extent(w, h, theta)
        if 2 * ex > spec.width or 2 * ey > spec.height:
            continue
        cx = rng.uniform(ex, spec.width - ex)
        cy = rng.uniform(ey, spec.height - ey)
        cand = canonicalize_array(np.array([[cx, cy, w, h, theta]]))
        if len(boxes) and iou_rotated_matrix(cand, boxes).max() >= spec.max_overlap:
            continue
        boxes = np.vstack([boxes, cand])
    return boxes


def coverage(boxes: np.ndarray, width: int, height: int, stride: int, scale: float = 1.0,
             samples: int = 4) -> np.ndarray:
    """Fraction of each ``stride x stride`` cell covered by the union of the
    boxes (sides multiplied by ``scale``), by ``samples^2`` point sampling."""
    gh, gw = height // stride, width // stride
    off = (np.arange(samples) + 0.5) * stride / samples
    xs = (np.arange(gw)[:, None] * stride + off).ravel()
    ys = (np.arange(gh)[:, None] * stride + off).ravel()
    inside = np.zeros((len(ys), len(xs)), dtype=bool)
    for cx, cy, w, h, th in np.asarray(boxes).reshape(-1, 5):
        t = np.radians(th)
        dx = xs[None, :] - cx
        dy = ys[:, None] - cy
        lu = dx * np.cos(t) + dy * np.sin(t)
        ln = -dx * np.sin(t) + dy * np.cos(t)
        inside |= (np.abs(lu) <= scale * h / 2) & (np.abs(ln) <= scale * w / 2)
    return inside.reshape(gh, samples, gw, samples).mean(axis=(1, 3))


def paint_features(spec: SceneSpec, boxes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Two-channel grid: full-box coverage and coverage of the box core
    (sides scaled by ``core_scale``), plus Gaussian noise."""
    ch0 = coverage(boxes, spec.width, spec.height, spec.feature_stride)
    ch1 = coverage(boxes, spec.width, spec.height, spec.feature_stride, spec.core_scale)
    feats = np.stack([ch0, ch1])
    if spec.feature_noise > 0:
        feats = feats + spec.feature_noise * rng.standard_normal(feats.shape)
    return feats.astype(np.float32)


def gen_scene(spec: SceneSpec, index: int = 0) -> Scene:
    rng = scene_rng(spec, index)
    n = int(rng.integers(spec.count[0], spec.count[1] + 1))
    boxes = place_boxes(spec, n, rng)
    return Scene(boxes, paint_features(spec, boxes, rng), index)


def gen_scenes(spec: SceneSpec, n: int, start: int = 0) -> list[Scene]:
    return [gen_scene(spec, start + i) for i in range(n)]


def _clutter(spec: SceneSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    out = []
    for _ in range(n):
        w, h, theta = _draw_box(spec, rng)
        out.append((rng.uniform(0, spec.width), rng.uniform(0, spec.height), w, h, theta))
    return canonicalize_array(np.array(out).reshape(-1, 5))


def gen_detections(gts: np.ndarray, spec: SceneSpec, rng: np.random.Generator | None = None):
    """Noisy detections of ``gts``: returns ``(boxes, scores, is_clutter)``.

    Kept objects get N(0, sigma) perturbations of centre, sides and angle
    and a score drawn from U(0.7, 1), or exactly 1 when every sigma is zero.
    Each ground truth also spawns a clutter box with probability
    ``clutter_rate``, scored from U(0, 0.4).
    """
    rng = rng or np.random.default_rng(spec.seed)
    gts = np.asarray(gts, dtype=float).reshape(-1, 5)
    keep = rng.random(len(gts)) >= spec.drop_rate
    kept = gts[keep].copy()
    noisy = spec.center_sigma > 0 or spec.size_sigma > 0 or spec.angle_sigma > 0
    if noisy and len(kept):
        kept[:, :2] += rng.normal(0.0, spec.center_sigma, (len(kept), 2))
        kept[:, 2:4] = np.maximum(kept[:, 2:4] + rng.normal(0.0, spec.size_sigma, (len(kept), 2)), 0.5)
        kept[:, 4] += rng.normal(0.0, spec.angle_sigma, len(kept))
        kept = canonicalize_array(kept)
        scores = rng.uniform(0.7, 1.0, len(kept))
    else:
        scores = np.ones(len(kept))
    n_clutter = int(np.count_nonzero(rng.random(len(gts)) < spec.clutter_rate))
    clutter = _clutter(spec, n_clutter, rng)
    boxes = np.vstack([kept, clutter])
    scores = np.concatenate([scores, rng.uniform(0.0, 0.4, n_clutter)])
    is_clutter = np.concatenate([np.zeros(len(kept), bool), np.ones(n_clutter, bool)])
    return boxes, scores, is_clutter


def _reflect(pos, vel, lo, hi):
    """Mirror positions that left ``[lo, hi]`` back inside and flip velocity."""
    below = pos < lo
    above = pos > hi
    pos = np.where(below, 2 * lo - pos, np.where(above, 2 * hi - pos, pos))
    vel = np.where(below | above, -vel, vel)
    return np.clip(pos, lo, hi), vel


def gen_sequence(spec: SceneSpec, frames: int, motion: str = "linear", index: int = 0) -> list[Frame]:
    """Objects move at constant velocity and bounce off the image border.

    ``motion="static"`` keeps every object in place.
    """
    if motion not in ("linear", "static"):
        raise ValueError(f"unknown motion model {motion!r}")
    rng = scene_rng(spec, index)
    n = int(rng.integers(spec.count[0], spec.count[1] + 1))
    boxes = place_boxes(spec, n, rng)
    speed = rng.uniform(*spec.speed_range, n)
    heading = rng.uniform(0, 2 * np.pi, n)
    vel = np.stack([speed * np.cos(heading), speed * np.sin(heading)], 1)
    if motion == "static":
        vel[:] = 0.0
    ext = np.stack(_half_extent(boxes[:, 2], boxes[:, 3], boxes[:, 4]), 1)
    lo = ext
    hi = np.array([spec.width, spec.height]) - ext
    det_rng = np.random.default_rng([spec.seed, index, 1])
    out = []
    pos = boxes[:, :2].copy()
    for f in range(frames):
        if f > 0:
            pos, vel = _reflect(pos + vel, vel, lo, hi)
        gts = boxes.copy()
        gts[:, :2] = pos
        dets, scores, clutter = gen_detections(gts, spec, det_rng)
        out.append(Frame(f, gts, dets, scores, clutter))
    return out


def scene_aabbs_inside(spec: SceneSpec, boxes: np.ndarray) -> bool:
    a = aabb_array(boxes)
    eps = 1e-9
    return bool(np.all(a[:, 0] >= -eps) and np.all(a[:, 1] >= -eps)
                and np.all(a[:, 2] <= spec.width + eps) and np.all(a[:, 3] <= spec.height + eps))

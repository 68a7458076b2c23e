"""Batch-averaged rotatable anchors.

Anchor sizes come from the mean ground-truth width and height of the current
mini-batch; every feature cell then carries one anchor per (angle, scale)
template.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import RotatedBox, array_to_boxes, canonicalize_array, quads_from_array

DEFAULT_ANGLES = (-45.0, 0.0, 45.0, 90.0)
DEFAULT_SCALES = (0.5, 1.0, 2.0)


class NoGroundTruthError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorConfig:
    grid_w: int = 32
    grid_h: int = 32
    feature_stride: float = 4.0
    angles: tuple[float, ...] = DEFAULT_ANGLES
    scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        if self.feature_stride <= 0:
            raise ValueError("feature_stride must be positive")
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError("grid dimensions must be >= 1")
        if not self.angles or not self.scales:
            raise ValueError("need at least one angle and one scale")

    @property
    def per_cell(self) -> int:
        return len(self.angles) * len(self.scales)


@dataclass(frozen=True)
class BatchStats:
    w_hat: float
    h_hat: float
    n_boxes: int

    def __post_init__(self):
        if self.n_boxes > 0 and not (self.w_hat > 0 and self.h_hat > 0):
            raise ValueError("mean sizes must be positive")


def bar_stats(batch: Sequence[Iterable[RotatedBox]]) -> BatchStats:
    """Mean (w, h) over every ground-truth box of every image in the batch."""
    ws, hs = [], []
    for image_boxes in batch:
        for b in image_boxes:
            ws.append(b.w)
            hs.append(b.h)
    if not ws:
        raise NoGroundTruthError("mini-batch contains no ground-truth boxes")
    return BatchStats(float(np.mean(ws)), float(np.mean(hs)), len(ws))


def bar_stats_arrays(batch: Sequence[np.ndarray]) -> BatchStats:
    """:func:`bar_stats` for per-image ``(N_i, 5)`` arrays."""
    arrs = [np.asarray(a, dtype=float).reshape(-1, 5) for a in batch]
    allb = np.concatenate(arrs) if arrs else np.zeros((0, 5))
    if len(allb) == 0:
        raise NoGroundTruthError("mini-batch contains no ground-truth boxes")
    return BatchStats(float(allb[:, 2].mean()), float(allb[:, 3].mean()), len(allb))


@dataclass
class AnchorSet:
    """Anchors in image pixels with their provenance.

    ``boxes`` is ``(N, 5)`` canonical; ``norm_w``/``norm_h`` hold the
    per-anchor ``kappa * w_hat`` and ``kappa * h_hat`` used as regression
    normalizers.  Ordering is cell-major (row, then column), then angle,
    then scale.
    """

    boxes: np.ndarray
    cell: np.ndarray
    angle_index: np.ndarray
    scale_index: np.ndarray
    norm_w: np.ndarray
    norm_h: np.ndarray
    config: AnchorConfig
    stats: BatchStats
    _quads: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def anchors(self) -> list[RotatedBox]:
        return array_to_boxes(self.boxes)

    @property
    def quads(self) -> np.ndarray:
        if self._quads is None:
            self._quads = quads_from_array(self.boxes)
        return self._quads

    @property
    def template_index(self) -> np.ndarray:
        return self.angle_index * len(self.config.scales) + self.scale_index


def template_boxes(cfg: AnchorConfig, stats: BatchStats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-template raw sizes, canonical boxes centred at the origin, and normalizers."""
    rows = []
    norms = []
    for theta in cfg.angles:
        for k in cfg.scales:
            rows.append((0.0, 0.0, k * stats.w_hat, k * stats.h_hat, theta))
            norms.append((k * stats.w_hat, k * stats.h_hat))
    raw = np.array(rows, dtype=float)
    return raw, canonicalize_array(raw), np.array(norms)


def generate_anchors(cfg: AnchorConfig, stats: BatchStats) -> AnchorSet:
    if not (stats.w_hat > 0 and stats.h_hat > 0):
        raise ValueError("anchor statistics must be positive")
    _, tmpl, norms = template_boxes(cfg, stats)
    n_t = len(tmpl)
    rows, cols = np.meshgrid(np.arange(cfg.grid_h), np.arange(cfg.grid_w), indexing="ij")
    cx = (cols.ravel() + 0.5) * cfg.feature_stride
    cy = (rows.ravel() + 0.5) * cfg.feature_stride
    n_cells = len(cx)
    boxes = np.repeat(tmpl[None, :, :], n_cells, axis=0)
    boxes[:, :, 0] = cx[:, None]
    boxes[:, :, 1] = cy[:, None]
    boxes = boxes.reshape(-1, 5)
    cell = np.repeat(np.arange(n_cells), n_t)
    t_idx = np.tile(np.arange(n_t), n_cells)
    n_s = len(cfg.scales)
    return AnchorSet(
        boxes=boxes,
        cell=cell,
        angle_index=t_idx // n_s,
        scale_index=t_idx % n_s,
        norm_w=np.tile(norms[:, 0], n_cells),
        norm_h=np.tile(norms[:, 1], n_cells),
        config=cfg,
        stats=stats,
    )

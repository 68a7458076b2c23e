"""Eight-coordinate regression targets and anchor labelling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import QuadBox, RotatedBox, aabb_array, axis_iou_matrix, boxes_to_array, collate_quads

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class InvalidNormalizerError(ValueError):
    pass


@dataclass(frozen=True)
class RegressTarget:
    tx: tuple[float, float, float, float]
    ty: tuple[float, float, float, float]

    def as_array(self) -> np.ndarray:
        return np.array([*self.tx, *self.ty], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "RegressTarget":
        a = [float(v) for v in arr]
        return cls(tuple(a[:4]), tuple(a[4:]))


def _check_norm(kw, kh):
    kw = np.asarray(kw, dtype=float)
    kh = np.asarray(kh, dtype=float)
    if np.any(~(kw > 0)) or np.any(~(kh > 0)):
        raise InvalidNormalizerError("normalizers must be positive")
    return kw, kh


def encode_array(anchors: np.ndarray, targets: np.ndarray, kw, kh) -> np.ndarray:
    """Vertex offsets ``(targets - anchors)`` scaled by ``(kw, kh)``.

    Both inputs are ``(N, 8)`` collated quads; ``kw``/``kh`` broadcast over rows.
    """
    kw, kh = _check_norm(kw, kh)
    a = np.asarray(anchors, dtype=float).reshape(-1, 8)
    g = np.asarray(targets, dtype=float).reshape(-1, 8)
    t = np.empty_like(g)
    t[:, :4] = (g[:, :4] - a[:, :4]) / np.reshape(kw, (-1, 1))
    t[:, 4:] = (g[:, 4:] - a[:, 4:]) / np.reshape(kh, (-1, 1))
    return t


def decode_array(anchors: np.ndarray, t: np.ndarray, kw, kh) -> np.ndarray:
    """Inverse of :func:`encode_array` (vertex order is left as produced)."""
    kw, kh = _check_norm(kw, kh)
    a = np.asarray(anchors, dtype=float).reshape(-1, 8)
    t = np.asarray(t, dtype=float).reshape(-1, 8)
    r = np.empty_like(t)
    r[:, :4] = a[:, :4] + t[:, :4] * np.reshape(kw, (-1, 1))
    r[:, 4:] = a[:, 4:] + t[:, 4:] * np.reshape(kh, (-1, 1))
    return r


def encode(anchor: QuadBox, target: QuadBox, kw: float, kh: float) -> RegressTarget:
    # both quads are re-collated so vertex k always pairs with vertex k
    a = collate_quads(anchor.as_array())
    g = collate_quads(target.as_array())
    return RegressTarget.from_array(encode_array(a, g, kw, kh)[0])


def decode(anchor: QuadBox, t: RegressTarget, kw: float, kh: float) -> QuadBox:
    a = collate_quads(anchor.as_array())
    r = decode_array(a, t.as_array(), kw, kh)
    return QuadBox.from_array(collate_quads(r)[0])


@dataclass
class MatchLabels:
    """Per-anchor labels: 1 target, 0 background, -1 ignored.

    ``phi`` is the regression mask and ``matched`` the index of the
    best-overlapping ground truth (-1 for unmatched anchors).
    """

    labels: np.ndarray
    phi: np.ndarray
    matched: np.ndarray
    max_iou: np.ndarray

    def to_records(self) -> list[dict]:
        return [
            {"anchor": i, "label": int(l), "phi": int(p), "matched": int(m), "max_iou": float(o)}
            for i, (l, p, m, o) in enumerate(zip(self.labels, self.phi, self.matched, self.max_iou))
        ]


def match_arrays(anchors: np.ndarray, gts: np.ndarray, pos_threshold: float = 0.5,
                 neg_threshold: float | None = 0.3, anchor_extents: np.ndarray | None = None) -> MatchLabels:
    """Label anchors by axis-converted IoU against ground truths.

    Anchors at or above ``pos_threshold`` are targets; below
    ``neg_threshold`` background; in between ignored by the classifier.
    ``neg_threshold=None`` makes every non-positive anchor background.
    ``anchor_extents`` may carry precomputed axis-aligned extents of the anchors.
    """
    if not 0.0 < pos_threshold < 1.0:
        raise ValueError("pos_threshold must lie in (0, 1)")
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 5)
    gts = np.asarray(gts, dtype=float).reshape(-1, 5)
    n = len(anchors)
    if len(gts) == 0:
        return MatchLabels(np.zeros(n, int), np.zeros(n, int), np.full(n, -1), np.zeros(n))
    ext = aabb_array(anchors) if anchor_extents is None else anchor_extents
    iou = axis_iou_matrix(ext, aabb_array(gts))
    best = iou.argmax(axis=1)  # first maximum, i.e. lowest gt index on ties
    best_iou = iou[np.arange(n), best]
    pos = best_iou >= pos_threshold
    labels = np.full(n, NEGATIVE)
    if neg_threshold is not None:
        labels[(best_iou >= neg_threshold) & ~pos] = IGNORE
    labels[pos] = POSITIVE
    return MatchLabels(labels, pos.astype(int), np.where(pos, best, -1), best_iou)


def match(anchors, gts: Sequence[RotatedBox], pos_threshold: float = 0.5,
          neg_threshold: float | None = 0.3) -> MatchLabels:
    boxes = anchors.boxes if hasattr(anchors, "boxes") else np.asarray(anchors, dtype=float)
    return match_arrays(boxes, boxes_to_array(gts), pos_threshold, neg_threshold)


def sample_labels(labels: np.ndarray, n_cls: int = 64, pos_fraction: float = 0.25,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Indices of a classification minibatch: up to ``pos_fraction * n_cls``
    positives, negatives fill the rest (1:3 at the default fraction)."""
    rng = rng or np.random.default_rng()
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos), int(round(pos_fraction * n_cls)))
    n_neg = min(len(neg), n_cls - n_pos)
    pick_pos = rng.choice(pos, n_pos, replace=False) if n_pos else pos[:0]
    pick_neg = rng.choice(neg, n_neg, replace=False) if n_neg else neg[:0]
    return np.concatenate([pick_pos, pick_neg]).astype(int)

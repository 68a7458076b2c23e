"""Matching detections to ground truth and the usual detection metrics.

Overlap defaults to IoU of the boxes' axis-aligned extents; pass
``iou="rotated"`` for polygon IoU.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .geometry import RotatedBox, iou_axis_matrix, iou_rotated_matrix, wrap_angles


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    box: RotatedBox
    score: float
    cls: str | None = None

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    image_id: Hashable
    box: RotatedBox
    cls: str | None = None


@dataclass
class Counts:
    tp: int
    fp: int
    fn: int


@dataclass
class MatchResult:
    """``tp[i]`` / ``gt_index[i]`` refer to ``dets[i]``; ``gt_matched[j]`` to ``gts[j]``."""

    tp: np.ndarray
    gt_index: np.ndarray
    gt_matched: np.ndarray
    iou: np.ndarray

    @property
    def counts(self) -> Counts:
        tp = int(self.tp.sum())
        return Counts(tp, len(self.tp) - tp, int(len(self.gt_matched) - self.gt_matched.sum()))


@dataclass
class EvalCurve:
    x: np.ndarray
    y: np.ndarray
    ap: float | None = None
    best_f1: float | None = None
    counts: Counts | None = None

    def to_csv(self, path, header=("x", "y")) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for a, b in zip(self.x, self.y):
                fh.write(f"{a:.6g},{b:.6g}\n")


@dataclass
class OrientationHistogram:
    centers: np.ndarray
    probs: np.ndarray
    deltas: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def mass_within(self, limit: float) -> float:
        """Fraction of matched pairs with ``|delta| <= limit``."""
        if len(self.deltas) == 0:
            return 0.0
        return float(np.mean(np.abs(self.deltas) <= limit))

    @property
    def peak(self) -> float:
        return float(self.centers[int(np.argmax(self.probs))])


_IOU = {"axis": iou_axis_matrix, "rotated": iou_rotated_matrix}


def _score_order(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5,
                     iou: str = "axis") -> MatchResult:
    """Greedy matching in descending score order.

    Each detection looks at its best-overlapping ground truth in the same
    image (and class, when set).  It is a true positive if that overlap
    reaches ``iou_threshold`` and the ground truth is still free; otherwise a
    false positive.
    """
    iou_fn = _IOU[iou]
    by_image = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[(g.image_id, g.cls)].append(j)
    gt_boxes = np.array([g.box.as_tuple() for g in gts], dtype=float).reshape(-1, 5)
    tp = np.zeros(len(dets), dtype=bool)
    gidx = np.full(len(dets), -1)
    best_iou = np.zeros(len(dets))
    matched = np.zeros(len(gts), dtype=bool)
    det_groups = defaultdict(list)
    for i, d in enumerate(dets):
        det_groups[(d.image_id, d.cls)].append(i)
    for key, di in det_groups.items():
        gj = by_image.get(key, [])
        if not gj:
            continue
        di = np.array(di)
        dboxes = np.array([dets[i].box.as_tuple() for i in di], dtype=float)
        ov = iou_fn(dboxes, gt_boxes[gj])
        order = _score_order([dets[i].score for i in di])
        for o in order:
            b = int(np.argmax(ov[o]))
            best_iou[di[o]] = ov[o, b]
            if ov[o, b] >= iou_threshold and not matched[gj[b]]:
                matched[gj[b]] = True
                tp[di[o]] = True
                gidx[di[o]] = gj[b]
    return MatchResult(tp, gidx, matched, best_iou)


def precision_recall(counts: Counts) -> tuple[float, float]:
    """Precision is 1 with no detections; recall is 0 with no ground truth."""
    det = counts.tp + counts.fp
    pos = counts.tp + counts.fn
    precision = counts.tp / det if det else 1.0
    recall = counts.tp / pos if pos else 0.0
    return precision, recall


def f1(precision: float, recall: float) -> float:
    s = precision + recall
    return 2 * precision * recall / s if s > 0 else 0.0


def pr_points(scores, tp, n_gt: int):
    """Precision and recall at every distinct score threshold, high to low."""
    scores = np.asarray(scores, dtype=float)
    tp = np.asarray(tp, dtype=bool)
    order = _score_order(scores)
    s, t = scores[order], tp[order]
    ctp = np.cumsum(t)
    cfp = np.cumsum(~t)
    # a threshold admits every detection with score >= it, so only the last
    # index of each run of tied scores is a reachable operating point
    last = np.append(s[1:] != s[:-1], True) if len(s) else np.zeros(0, bool)
    ctp, cfp = ctp[last], cfp[last]
    recall = ctp / n_gt if n_gt else np.zeros(len(ctp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return precision, recall, s[last]


def ap_from_pr(precision, recall) -> float:
    """All-points interpolated area under the monotone precision envelope."""
    if len(recall) == 0:
        return 0.0
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([precision[:1], precision])
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * env[1:]))


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5,
                      iou: str = "axis") -> float:
    """AP of one class (or of all detections when classes are unset)."""
    if not gts:
        return 0.0
    m = match_detections(dets, gts, iou_threshold, iou)
    p, r, _ = pr_points([d.score for d in dets], m.tp, len(gts))
    return ap_from_pr(p, r)


def mean_average_precision(dets, gts, iou_threshold: float = 0.5, iou: str = "axis") -> tuple[float, dict]:
    classes = sorted({g.cls for g in gts}, key=str)
    per = {}
    for c in classes:
        per[c] = average_precision([d for d in dets if d.cls == c], [g for g in gts if g.cls == c],
                                   iou_threshold, iou)
    return (float(np.mean(list(per.values()))) if per else 0.0), per


def pr_curve(dets, gts, iou_threshold: float = 0.5, iou: str = "axis") -> EvalCurve:
    m = match_detections(dets, gts, iou_threshold, iou)
    p, r, _ = pr_points([d.score for d in dets], m.tp, len(gts))
    f = [f1(a, b) for a, b in zip(p, r)]
    return EvalCurve(r, p, ap_from_pr(p, r), max(f) if f else 0.0, m.counts)


def recall_iou_curve(dets, gts, iou_grid, score_threshold: float = 0.0, iou: str = "axis") -> EvalCurve:
    grid = np.asarray(iou_grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or grid[0] <= 0 or grid[-1] > 1:
        raise ValueError("iou_grid must be strictly increasing in (0, 1]")
    kept = [d for d in dets if d.score >= score_threshold]
    ys = []
    for thr in grid:
        c = match_detections(kept, gts, thr, iou).counts
        ys.append(precision_recall(c)[1])
    return EvalCurve(grid, np.array(ys))


def angle_deltas(dets, gts, iou_threshold: float = 0.5, iou: str = "axis") -> np.ndarray:
    """Axial angle differences ``wrap(pred - gt)`` in (-90, 90] for true positives."""
    m = match_detections(dets, gts, iou_threshold, iou)
    idx = np.flatnonzero(m.tp)
    d = np.array([dets[i].box.theta - gts[m.gt_index[i]].box.theta for i in idx], dtype=float)
    return wrap_angles(d)


def orientation_deviation(dets, gts, iou_threshold: float = 0.5, bin_width: float = 5.0,
                          iou: str = "axis") -> OrientationHistogram:
    """Normalised histogram of angle deviations.

    Bins are centred on multiples of ``bin_width``; the bin at 90 also takes
    deviations just above -90, since both describe the same axial offset.
    """
    n_bins = int(round(180.0 / bin_width))
    if abs(n_bins * bin_width - 180.0) > 1e-9:
        raise ValueError("bin_width must divide 180")
    centers = -90.0 + bin_width * np.arange(1, n_bins + 1)
    deltas = angle_deltas(dets, gts, iou_threshold, iou)
    k = np.round(deltas / bin_width).astype(int)
    k[k <= -n_bins // 2] += n_bins
    hist = np.bincount(k + n_bins // 2 - 1, minlength=n_bins).astype(float)
    probs = hist / hist.sum() if hist.sum() else hist
    return OrientationHistogram(centers, probs, deltas)


def summarize(dets, gts, iou_threshold: float = 0.5, score_threshold: float = 0.0, iou: str = "axis") -> dict:
    """Counts, precision, recall and F1 at ``score_threshold``; AP over all scores."""
    kept = [d for d in dets if d.score >= score_threshold]
    c = match_detections(kept, gts, iou_threshold, iou).counts
    p, r = precision_recall(c)
    return {"tp": c.tp, "fp": c.fp, "fn": c.fn, "precision": p, "recall": r, "f1": f1(p, r),
            "ap": average_precision(dets, gts, iou_threshold, iou)}


def from_arrays(image_ids, boxes, scores=None, classes=None):
    """Build Detection (with scores) or GroundTruth (without) lists from arrays."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    out = []
    for n, (iid, b) in enumerate(zip(image_ids, boxes)):
        box = RotatedBox(*map(float, b))
        cls = None if classes is None else classes[n]
        if scores is None:
            out.append(GroundTruth(iid, box, cls))
        else:
            out.append(Detection(iid, box, float(scores[n]), cls))
    return out

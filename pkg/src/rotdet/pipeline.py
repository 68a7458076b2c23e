"""Two-stage flow for the toy model: anchors, proposals, refinement, NMS.

Training follows the approximate joint scheme: each step labels anchors,
decodes the current proposal-stage predictions into rotated RoIs, labels
those RoIs, then takes one gradient step on both stages with the RoI set
held fixed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorConfig, BatchStats, bar_stats_arrays, generate_anchors, template_boxes
from .boxcodec import POSITIVE, decode_array, encode_array, match_arrays, sample_labels
from .geometry import aabb_array, min_area_rect_quads, nms_rotated_array, quads_from_array
from .losses import HyperParams, sgd_step
from .model import ImageBatch, StageBatch, ToyModel, loss_and_grad
from .pooling import image_to_map, pool_means, pool_templates


class DivergenceError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    feature_stride: int = 4
    grid_w: int = 32
    grid_h: int = 32
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    rdn_pos_iou: float = 0.5
    pos_fraction: float = 0.25
    rpn_top_n: int = 500
    rdn_top_n: int = 300
    score_threshold: float = 0.05
    nms_threshold: float = 0.3
    min_size: float = 1.0
    rdn_batch: int = 128
    rdn_pos_fraction: float = 0.25

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(grid_w=self.grid_w, grid_h=self.grid_h, feature_stride=self.feature_stride)


def _valid_rois(rois: np.ndarray, width: float, height: float, min_size: float) -> np.ndarray:
    ok = np.all(np.isfinite(rois), axis=1)
    ok &= rois[:, 2] >= min_size
    ok &= rois[:, 3] <= 4 * max(width, height)
    ok &= (rois[:, 0] >= 0) & (rois[:, 0] <= width) & (rois[:, 1] >= 0) & (rois[:, 1] <= height)
    return ok


def decode_to_boxes(ref_quads: np.ndarray, t: np.ndarray, kw, kh) -> np.ndarray:
    """Decoded vertices turned into rotated boxes by minimum-area fitting."""
    return min_area_rect_quads(decode_array(ref_quads, t, kw, kh))


def build_batch(model: ToyModel, features: np.ndarray, gts_list: list, stats: BatchStats,
                cfg: PipelineConfig, hp: HyperParams, rng: np.random.Generator) -> list[ImageBatch]:
    """Supervision for one training step.

    ``features`` is ``(B, F, H, W)``; ``gts_list`` holds the ``(N_b, 5)``
    ground truths of each image.  Anchors come from the batch statistics.
    The second stage sees the current top-scoring proposals of each image
    plus its ground truths, sampled down to ``cfg.rdn_batch`` RoIs.
    """
    nb = len(gts_list)
    kk = model.k * model.k
    F = model.n_features
    stride = cfg.feature_stride
    height = features.shape[2] * stride
    width = features.shape[3] * stride
    acfg = cfg.anchor_config()
    anchors = generate_anchors(acfg, stats)
    _, tmpl, _ = template_boxes(acfg, stats)
    pooled = pool_templates(features, image_to_map(tmpl, stride), model.k).reshape(nb, -1, kk, F)
    a_ext = aabb_array(anchors.boxes)
    a_quads = anchors.quads

    rpn_parts, r_boxes, r_img, r_y, r_t = [], [], [], [], []
    for b, gts in enumerate(gts_list):
        lab = match_arrays(anchors.boxes, gts, cfg.pos_iou, cfg.neg_iou, anchor_extents=a_ext)
        idx = sample_labels(lab.labels, int(hp.n_cls), cfg.pos_fraction, rng)
        y = (lab.labels[idx] == POSITIVE).astype(int)
        t_hat = np.zeros((len(idx), 8))
        pos = idx[y == 1]
        if len(pos):
            t_hat[y == 1] = encode_array(a_quads[pos], quads_from_array(gts[lab.matched[pos]]),
                                         anchors.norm_w[pos], anchors.norm_h[pos])
        rpn_parts.append(StageBatch(pooled[b, idx], y, t_hat, y.astype(float)))

        # rotated RoIs from the current proposal predictions, plus the gts
        s, q = model.predict("rpn", pooled[b])
        top = np.argsort(-s, kind="stable")[:cfg.rpn_top_n]
        rois = decode_to_boxes(a_quads[top], q[top], anchors.norm_w[top], anchors.norm_h[top])
        rois = np.vstack([rois[_valid_rois(rois, width, height, cfg.min_size)], gts])
        rlab = match_arrays(rois, gts, cfg.rdn_pos_iou, None)
        keep = sample_labels(rlab.labels, cfg.rdn_batch, cfg.rdn_pos_fraction, rng)
        rois = rois[keep]
        ry = (rlab.labels[keep] == POSITIVE).astype(int)
        rt = np.zeros((len(keep), 8))
        p = ry == 1
        if np.any(p):
            rt[p] = encode_array(quads_from_array(rois[p]), quads_from_array(gts[rlab.matched[keep][p]]),
                                 rois[p, 2], rois[p, 3])
        r_boxes.append(rois)
        r_img.append(np.full(len(rois), b))
        r_y.append(ry)
        r_t.append(rt)

    rimg = np.concatenate(r_img)
    r_pooled, _ = pool_means(features, image_to_map(np.vstack(r_boxes), stride), model.k,
                             check_bounds=False, image_index=rimg)
    out = []
    for b in range(nb):
        sr = rimg == b
        out.append(ImageBatch(rpn_parts[b], StageBatch(r_pooled[sr], r_y[b], r_t[b], r_y[b].astype(float))))
    return out


def train(model: ToyModel, scenes, hp: HyperParams, iterations: int, cfg: PipelineConfig | None = None,
          seed: int = 0, log_path=None, log_every: int = 1, callback=None):
    """Run ``iterations`` SGD steps over ``scenes`` (objects with ``gts`` and
    ``features``).  Returns the per-iteration log rows."""
    cfg = cfg or PipelineConfig()
    rng = np.random.default_rng(seed)
    rows = []
    order = rng.permutation(len(scenes))
    cursor = 0
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "L1", "L2", "joint", "lr"])
    try:
        for it in range(iterations):
            picks = []
            while len(picks) < hp.batch_size:
                if cursor == len(order):
                    order = rng.permutation(len(scenes))
                    cursor = 0
                s = scenes[order[cursor]]
                cursor += 1
                if len(s.gts):
                    picks.append(s)
                if cursor == len(order) and not picks and not any(len(x.gts) for x in scenes):
                    raise ValueError("no scene contains ground truth")
            stats = bar_stats_arrays([s.gts for s in picks])
            feats = np.stack([s.features for s in picks])
            batch = build_batch(model, feats, [s.gts for s in picks], stats, cfg, hp, rng)
            report, grad = loss_and_grad(model, batch, hp)
            if not math.isfinite(report.joint) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            lr = hp.lr_at(it)
            sgd_step(model, grad, hp, lr)
            if not np.all(np.isfinite(model.params)):
                raise DivergenceError(f"non-finite parameters after iteration {it}")
            row = (it, float(np.sum(report.l1)), float(np.sum(report.l2)), report.joint, lr)
            rows.append(row)
            if writer is not None and it % log_every == 0:
                writer.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.9g}", f"{row[3]:.9g}", f"{row[4]:.9g}"])
            if callback is not None:
                callback(it, row)
    finally:
        if fh is not None:
            fh.close()
    return rows


def global_stats(scenes) -> BatchStats:
    """Mean box size over a whole training set, used for inference anchors."""
    return bar_stats_arrays([s.gts for s in scenes])


@dataclass
class DetectionResult:
    boxes: np.ndarray
    scores: np.ndarray
    n_proposals: int
    n_refined: int


class Detector:
    """Inference with fixed anchor statistics."""

    def __init__(self, model: ToyModel, stats: BatchStats, cfg: PipelineConfig | None = None):
        self.model = model
        self.stats = stats
        self.cfg = cfg or PipelineConfig()
        acfg = self.cfg.anchor_config()
        self.anchors = generate_anchors(acfg, stats)
        raw, tmpl, _ = template_boxes(acfg, stats)
        self.templates_map = image_to_map(tmpl, self.cfg.feature_stride)

    def anchor_scores(self, features: np.ndarray):
        if features.shape[1:] != (self.cfg.grid_h, self.cfg.grid_w):
            raise ValueError(f"feature grid {features.shape[1:]} does not match "
                             f"{(self.cfg.grid_h, self.cfg.grid_w)}")
        if features.shape[0] != self.model.n_features:
            raise ValueError("feature channel count does not match the model")
        pooled = pool_templates(features, self.templates_map, self.model.k)
        pooled = pooled.reshape(-1, self.model.k ** 2, features.shape[0])
        return self.model.predict("rpn", pooled)

    def proposals(self, features: np.ndarray, top_n: int | None = None):
        top_n = self.cfg.rpn_top_n if top_n is None else top_n
        s, q = self.anchor_scores(features)
        order = np.argsort(-s, kind="stable")[:top_n]
        a = self.anchors
        rois = decode_to_boxes(a.quads[order], q[order], a.norm_w[order], a.norm_h[order])
        width = self.cfg.grid_w * self.cfg.feature_stride
        height = self.cfg.grid_h * self.cfg.feature_stride
        ok = _valid_rois(rois, width, height, self.cfg.min_size)
        return rois[ok], s[order][ok]

    def detect(self, features: np.ndarray, rpn_top_n: int | None = None, rdn_top_n: int | None = None,
               score_threshold: float | None = None, nms_threshold: float | None = None) -> DetectionResult:
        cfg = self.cfg
        rdn_top_n = cfg.rdn_top_n if rdn_top_n is None else rdn_top_n
        score_threshold = cfg.score_threshold if score_threshold is None else score_threshold
        nms_threshold = cfg.nms_threshold if nms_threshold is None else nms_threshold
        if rdn_top_n < 1 or (rpn_top_n is not None and rpn_top_n < 1):
            raise ValueError("top-N caps must be >= 1")
        rois, _ = self.proposals(features, rpn_top_n)
        n_prop = len(rois)
        if n_prop == 0:
            return DetectionResult(np.zeros((0, 5)), np.zeros(0), 0, 0)
        pooled, _ = pool_means(features, image_to_map(rois, cfg.feature_stride), self.model.k,
                               check_bounds=False)
        s, q = self.model.predict("rdn", pooled)
        boxes = decode_to_boxes(quads_from_array(rois), q, rois[:, 2], rois[:, 3])
        ok = np.all(np.isfinite(boxes), axis=1) & (boxes[:, 2] > 0)
        boxes, s = boxes[ok], s[ok]
        order = np.argsort(-s, kind="stable")[:rdn_top_n]
        boxes, s = boxes[order], s[order]
        n_ref = len(boxes)
        keep = s >= score_threshold
        boxes, s = boxes[keep], s[keep]
        kept = nms_rotated_array(boxes, s, nms_threshold) if len(boxes) else np.zeros(0, int)
        return DetectionResult(boxes[kept], s[kept], n_prop, n_ref)

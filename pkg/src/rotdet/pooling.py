"""Rotatable position-sensitive pooling.

A rotated RoI is split into a ``k x k`` grid of bins in its own frame.  Bin
``(i, j)`` reads only its own channel group of the score-map stack, so each
bin is sensitive to one relative position inside the object.

Coordinates here are feature-map pixels: pixel ``(u, v)`` is the value at
column ``u``, row ``v``, with its centre at the integer point.  Image boxes
are moved onto the map with :func:`image_to_map`.

Local RoI frame
---------------
``du`` runs along the short side (width ``w``) and ``dv`` along the long side
(height ``h``), both measured from a corner, so the RoI covers
``[0, w) x [0, h)``.  The frame is the image frame rotated by
``theta - 90`` degrees; for a vertical RoI (``theta = 90``) it is the plain
axis-aligned frame with the origin at the top-left corner.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .boxcodec import RegressTarget
from .geometry import RotatedBox, boxes_to_array

LAYOUT = "kps-v1"


class DomainError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


def pool_angle(theta_star: float) -> float:
    """Derotation angle for an RoI at ``theta_star`` in its printed
    piecewise form.  The pooling frame itself uses :func:`frame_angle`."""
    if not (-90.0 < theta_star <= 90.0) or not math.isfinite(theta_star):
        raise DomainError(f"angle {theta_star} outside (-90, 90]")
    return theta_star - 90.0 if theta_star <= 0 else 90.0 - theta_star


def frame_angle(theta_star):
    """Rotation of the local RoI frame relative to the image frame.

    Equal to :func:`pool_angle` for ``theta_star <= 0`` and its negation
    above zero.  Using one formula keeps the ``dv`` axis on the long side for
    every angle.
    """
    return np.asarray(theta_star, dtype=float) - 90.0


def image_to_map(boxes, stride: float) -> np.ndarray:
    """Image-pixel boxes ``(N, 5)`` to feature-map coordinates.

    The centre of feature cell ``(col, row)`` sits at image point
    ``((col + 0.5) * stride, (row + 0.5) * stride)``.
    """
    b = np.array(boxes, dtype=float).reshape(-1, 5)
    b[:, 0] = b[:, 0] / stride - 0.5
    b[:, 1] = b[:, 1] / stride - 0.5
    b[:, 2:4] /= stride
    return b


def cls_channel(i: int, j: int, c: int, k: int = 3) -> int:
    """Channel of bin column ``i`` and row ``j`` (both 1-based) for class ``c``."""
    return k * k * c + k * (j - 1) + (i - 1)


def reg_channel(i: int, j: int, d: int, k: int = 3) -> int:
    """Channel of bin ``(i, j)`` (1-based) for regression dimension ``d``."""
    return cls_channel(i, j, d, k)


@dataclass
class ScoreMapStack:
    """``values`` has shape ``(channels, height, width)``, stored as float32."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError("score maps must be (channels, height, width)")
        v = v.astype(np.float32, copy=False)
        if not np.all(np.isfinite(v)):
            raise ValueError("score maps contain non-finite values")
        self.values = v

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def save(self, path) -> None:
        path = Path(path)
        self.values.astype("<f4").tofile(path)
        meta = {"w": self.width, "h": self.height, "channels": self.channels, "layout": LAYOUT}
        sidecar(path).write_text(json.dumps(meta))

    @classmethod
    def load(cls, path) -> "ScoreMapStack":
        path = Path(path)
        meta = json.loads(sidecar(path).read_text())
        if meta.get("layout") != LAYOUT:
            raise ValueError(f"unsupported layout {meta.get('layout')!r}")
        n = meta["channels"] * meta["h"] * meta["w"]
        raw = np.fromfile(path, dtype="<f4")
        if raw.size != n:
            raise ValueError(f"expected {n} values, found {raw.size}")
        return cls(raw.reshape(meta["channels"], meta["h"], meta["w"]))


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


@dataclass
class PooledBins:
    """Pooled values indexed ``[c, j, i]``: class, bin row (along the long
    side), bin column (along the short side)."""

    values: np.ndarray

    @property
    def k(self) -> int:
        return self.values.shape[1]


def _frames(rois: np.ndarray):
    phi = np.radians(frame_angle(rois[:, 4]))
    return np.cos(phi), np.sin(phi)


def _bin_edges(length: np.ndarray, k: int, quantize: bool):
    """Lower and upper bin bounds, each ``(R, k)``."""
    i = np.arange(k)
    lo = length[:, None] * i / k
    hi = length[:, None] * (i + 1) / k
    hi[:, -1] = length
    if quantize:
        lo, hi = np.floor(lo), np.ceil(hi)
    return _snap(lo), _snap(hi)


SNAP = 1e-9


def _snap(x):
    """Round to a ``SNAP`` grid so points lying on a bin edge up to rounding
    error fall on the same side every time."""
    return np.round(np.asarray(x, dtype=float) / SNAP) * SNAP


def _local_coords(du_x, du_y, c, s, w, h):
    """Map offsets from the RoI centre to corner-based local coordinates."""
    lu = du_x * c + du_y * s + w / 2
    lv = -du_x * s + du_y * c + h / 2
    return _snap(lu), _snap(lv)


def bilinear_weights(px, py, width: int, height: int):
    """Four (index, weight) pairs per point after clamping onto the map."""
    px = np.clip(np.asarray(px, dtype=float), 0.0, width - 1)
    py = np.clip(np.asarray(py, dtype=float), 0.0, height - 1)
    x0 = np.minimum(np.floor(px).astype(int), max(width - 2, 0))
    y0 = np.minimum(np.floor(py).astype(int), max(height - 2, 0))
    fx, fy = px - x0, py - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], -1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], -1)
    return idx, wts


def outside_map(rois: np.ndarray, width: int, height: int) -> np.ndarray:
    """True for RoIs whose extent misses the map's pixel-centre rectangle."""
    c, s = np.abs(np.cos(np.radians(rois[:, 4]))), np.abs(np.sin(np.radians(rois[:, 4])))
    ex = (rois[:, 3] * c + rois[:, 2] * s) / 2
    ey = (rois[:, 3] * s + rois[:, 2] * c) / 2
    return ((rois[:, 0] + ex < 0) | (rois[:, 0] - ex > width - 1)
            | (rois[:, 1] + ey < 0) | (rois[:, 1] - ey > height - 1))


def pooling_matrix(rois, width: int, height: int, k: int = 3, quantize: bool = False,
                   check_bounds: bool = True, image_index=None, n_images: int = 1,
                   chunk: int = 1024):
    """Sparse ``(R * k * k, n_images * height * width)`` averaging operator.

    Row ``r * k * k + j * k + i`` holds ``1 / n_p`` on each pixel of bin
    ``(i, j)`` of RoI ``r``; an empty bin holds bilinear weights at its centre
    instead.  ``quantize=True`` rounds bin bounds outward to whole pixels,
    which lets neighbouring bins share boundary pixels.

    With ``image_index`` each RoI reads map ``image_index[r]`` of a stack of
    ``n_images`` maps, flattened image-major.

    Returns the matrix and a boolean ``(R, k * k)`` mask of empty bins.
    """
    rois = np.asarray(rois, dtype=float).reshape(-1, 5)
    n = len(rois)
    img = np.zeros(n, int) if image_index is None else np.asarray(image_index, dtype=int)
    if check_bounds and n and np.any(outside_map(rois, width, height)):
        raise OutOfBoundsError("RoI lies entirely outside the score map")
    kk = k * k
    plane = width * height
    rows_all, cols_all, vals_all = [], [], []
    empty = np.zeros((n, kk), dtype=bool)
    for start in range(0, n, chunk):
        r = rois[start:start + chunk]
        m = len(r)
        cos, sin = _frames(r)
        w, h = r[:, 2], r[:, 3]
        ex = (w * np.abs(cos) + h * np.abs(sin)) / 2 + 1e-6
        ey = (w * np.abs(sin) + h * np.abs(cos)) / 2 + 1e-6
        u_lo = np.clip(np.ceil(r[:, 0] - ex), 0, width - 1).astype(int)
        u_hi = np.clip(np.floor(r[:, 0] + ex), -1, width - 1).astype(int)
        v_lo = np.clip(np.ceil(r[:, 1] - ey), 0, height - 1).astype(int)
        v_hi = np.clip(np.floor(r[:, 1] + ey), -1, height - 1).astype(int)
        nw = max(int((u_hi - u_lo).max()) + 1, 1)
        nh = max(int((v_hi - v_lo).max()) + 1, 1)
        us = u_lo[:, None] + np.arange(nw)  # (m, nw)
        vs = v_lo[:, None] + np.arange(nh)  # (m, nh)
        in_map = (us <= u_hi[:, None])[:, None, :] & (vs <= v_hi[:, None])[:, :, None]
        dx = (us - r[:, 0:1])[:, None, :]
        dy = (vs - r[:, 1:2])[:, :, None]
        lu, lv = _local_coords(dx, dy, cos[:, None, None], sin[:, None, None],
                               w[:, None, None], h[:, None, None])
        ulo, uhi = _bin_edges(w, k, quantize)
        vlo, vhi = _bin_edges(h, k, quantize)
        base = img[start:start + m] * plane
        if quantize:
            row_idx, col_idx = [], []
            for j in range(k):
                in_v = (lv >= vlo[:, j, None, None]) & (lv < vhi[:, j, None, None])
                for i in range(k):
                    mem = in_map & in_v & (lu >= ulo[:, i, None, None]) & (lu < uhi[:, i, None, None])
                    rr, yy, xx = np.nonzero(mem)
                    row_idx.append((start + rr) * kk + j * k + i)
                    col_idx.append(base[rr] + vs[rr, yy] * width + us[rr, xx])
            row_idx = np.concatenate(row_idx)
            col_idx = np.concatenate(col_idx)
        else:
            inside = in_map & (lu >= 0) & (lu < w[:, None, None]) & (lv >= 0) & (lv < h[:, None, None])
            rr, yy, xx = np.nonzero(inside)
            pu, pv = lu[rr, yy, xx], lv[rr, yy, xx]
            # bin index = number of interior bin edges at or below the point
            bi = np.zeros(len(rr), int)
            bj = np.zeros(len(rr), int)
            for e in range(1, k):
                bi += pu >= ulo[rr, e]
                bj += pv >= vlo[rr, e]
            row_idx = (start + rr) * kk + bj * k + bi
            col_idx = base[rr] + vs[rr, yy] * width + us[rr, xx]
        local = row_idx - start * kk
        counts = np.bincount(local, minlength=m * kk)
        rows_all.append(row_idx)
        cols_all.append(col_idx)
        vals_all.append(1.0 / counts[local])
        e = counts == 0
        if np.any(e):
            er = np.flatnonzero(e)
            rr, b = er // kk, er % kk
            bi, bj = b % k, b // k
            cu = (ulo[rr, bi] + uhi[rr, bi]) / 2 - w[rr] / 2
            cv = (vlo[rr, bj] + vhi[rr, bj]) / 2 - h[rr] / 2
            px = r[rr, 0] + cu * cos[rr] - cv * sin[rr]
            py = r[rr, 1] + cu * sin[rr] + cv * cos[rr]
            idx, wts = bilinear_weights(px, py, width, height)
            rows_all.append(np.repeat(start * kk + er, 4))
            cols_all.append((idx + base[rr, None]).ravel())
            vals_all.append(wts.ravel())
            empty[start:start + m] = e.reshape(m, kk)
    if rows_all:
        rows = np.concatenate(rows_all)
        cols = np.concatenate(cols_all)
        vals = np.concatenate(vals_all)
    else:
        rows = cols = np.zeros(0, int)
        vals = np.zeros(0)
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n * kk, n_images * plane))
    return mat, empty


def pool_means(values: np.ndarray, rois, k: int = 3, quantize: bool = False,
               check_bounds: bool = True, image_index=None):
    """Per-bin means of every channel: ``(R, k * k, C)`` plus the empty-bin mask.

    ``values`` is ``(C, H, W)``, or ``(B, C, H, W)`` together with
    ``image_index`` naming the map each RoI reads.
    """
    values = np.asarray(values)
    if values.ndim == 3:
        values = values[None]
    nb, c, hgt, wid = values.shape
    mat, empty = pooling_matrix(rois, wid, hgt, k, quantize, check_bounds, image_index, nb)
    flat = values.transpose(0, 2, 3, 1).reshape(-1, c).astype(float)
    # sum with unit weights and divide once, so integer-valued maps pool exactly
    nnz = np.diff(mat.indptr)
    interior = ~empty.ravel()
    mat.data[np.repeat(interior, nnz)] = 1.0
    counts = np.where(interior, nnz, 1)
    out = (np.asarray(mat @ flat) / counts[:, None]).reshape(-1, k * k, c)
    return out, empty


def _select_bins(means: np.ndarray, groups: int, k: int) -> np.ndarray:
    """Pick channel ``k*k*g + b`` for bin ``b`` of group ``g``: ``(R, groups, k*k)``."""
    kk = k * k
    b = np.arange(kk)
    ch = kk * np.arange(groups)[:, None] + b[None, :]
    return means[:, b[None, :], ch]


def _roi_array(rroi) -> np.ndarray:
    if isinstance(rroi, RotatedBox):
        return boxes_to_array([rroi])
    return np.asarray(rroi, dtype=float).reshape(-1, 5)


def rps_pool(maps: ScoreMapStack, rroi, k: int = 3, quantize: bool = False) -> PooledBins:
    """Pool one RoI (feature-map coordinates) into ``(C+1, k, k)`` bins."""
    roi = _roi_array(rroi)
    pool_angle(float(roi[0, 4]))
    groups, rem = divmod(maps.channels, k * k)
    if rem or groups < 1:
        raise ValueError(f"{maps.channels} channels is not a multiple of {k * k}")
    means, _ = pool_means(maps.values, roi, k, quantize)
    return PooledBins(_select_bins(means, groups, k)[0].reshape(groups, k, k))


def vote(bins: PooledBins) -> np.ndarray:
    """Per-class score: sum over all bins."""
    v = np.asarray(bins.values if isinstance(bins, PooledBins) else bins, dtype=float)
    return v.reshape(v.shape[0], -1).sum(axis=1)


def softmax_scores(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("scores must be finite")
    z = np.exp(r - r.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def pool_regression(maps: ScoreMapStack, rroi, k: int = 3, quantize: bool = False) -> RegressTarget:
    """R-PS pool each of the 8 dimensions and average its bins."""
    bins = rps_pool(maps, rroi, k, quantize)
    if bins.values.shape[0] != 8:
        raise ValueError("regression stack needs 8 * k * k channels")
    return RegressTarget.from_array(bins.values.reshape(8, -1).mean(axis=1))


# ---------------------------------------------------------------------------
# Anchor fast path.  Anchors sit on integer map coordinates, so every anchor
# of one template covers the same pixel offsets; pooling reduces to shifted
# sums over those offsets.


def template_offsets(template: np.ndarray, k: int = 3, quantize: bool = False):
    """Integer offsets ``(dx, dy)`` per bin for an RoI centred at the origin."""
    cx = cy = 0.0
    w, h, theta = float(template[2]), float(template[3]), float(template[4])
    cos, sin = _frames(np.array([[cx, cy, w, h, theta]]))
    cos, sin = cos[0], sin[0]
    ext = int(math.ceil(math.hypot(w, h) / 2)) + 1
    g = np.arange(-ext, ext + 1)
    dx = g[None, :].astype(float)
    dy = g[:, None].astype(float)
    lu, lv = _local_coords(dx, dy, cos, sin, w, h)
    ulo, uhi = _bin_edges(np.array([w]), k, quantize)
    vlo, vhi = _bin_edges(np.array([h]), k, quantize)
    out = []
    for j in range(k):
        for i in range(k):
            mem = (lu >= ulo[0, i]) & (lu < uhi[0, i]) & (lv >= vlo[0, j]) & (lv < vhi[0, j])
            yy, xx = np.nonzero(mem)
            out.append((g[xx], g[yy]))
    centres = []
    for j in range(k):
        for i in range(k):
            cu = (ulo[0, i] + uhi[0, i]) / 2 - w / 2
            cv = (vlo[0, j] + vhi[0, j]) / 2 - h / 2
            centres.append((cu * cos - cv * sin, cu * sin + cv * cos))
    return out, np.array(centres)


def _row_runs(dx: np.ndarray, dy: np.ndarray):
    """Split a convex lattice region into ``(dy, x_first, x_last)`` rows."""
    runs = []
    for y in np.unique(dy):
        xs = dx[dy == y]
        runs.append((int(y), int(xs.min()), int(xs.max())))
    return runs


def pool_templates(values: np.ndarray, templates: np.ndarray, k: int = 3,
                   quantize: bool = False) -> np.ndarray:
    """Pool every template at every map pixel.

    ``values`` is ``(C, H, W)`` or a batch ``(B, C, H, W)``.  ``templates``
    are ``(T, 5)`` boxes in map units (centres ignored).  Returns
    ``(H * W, T, k * k, C)`` (with a leading batch axis for batched input),
    pixel index ``row * W + col``, equal to :func:`pool_means` on the RoI
    centred at that pixel.

    Each bin is a convex set of lattice offsets, so its sum is a handful of
    row runs read off row-wise prefix sums.
    """
    values = np.asarray(values, dtype=float)
    batched = values.ndim == 4
    vb = values if batched else values[None]
    nb, c, hgt, wid = vb.shape
    templates = np.asarray(templates, dtype=float).reshape(-1, 5)
    offs = [template_offsets(t, k, quantize) for t in templates]
    pad = 0
    for bins, _ in offs:
        for dx, dy in bins:
            if len(dx):
                pad = max(pad, int(np.abs(dx).max()), int(np.abs(dy).max()))
    ph, pw = hgt + 2 * pad, wid + 2 * pad
    vp = np.zeros((nb, c, ph, pw + 1))
    vp[:, :, pad:pad + hgt, pad + 1:pad + wid + 1] = vb
    sv = np.cumsum(vp, axis=3)
    mp = np.zeros((ph, pw + 1))
    mp[pad:pad + hgt, pad + 1:pad + wid + 1] = 1.0
    sm = np.cumsum(mp, axis=1)
    flat_vals = vb.reshape(nb, c, -1)
    rows, cols = np.meshgrid(np.arange(hgt), np.arange(wid), indexing="ij")
    out = np.empty((len(templates), k * k, nb, c, hgt * wid))
    total = np.empty((nb, c, hgt, wid))
    count = np.empty((hgt, wid))
    for t, (bins, centres) in enumerate(offs):
        for b, (dx, dy) in enumerate(bins):
            total[:] = 0.0
            count[:] = 0.0
            for y, x0, x1 in _row_runs(dx, dy):
                r = slice(pad + y, pad + y + hgt)
                hi = slice(pad + x1 + 1, pad + x1 + 1 + wid)
                lo = slice(pad + x0, pad + x0 + wid)
                total += sv[:, :, r, hi] - sv[:, :, r, lo]
                count += sm[r, hi] - sm[r, lo]
            res = (total / np.maximum(count, 1)).reshape(nb, c, -1)
            e = np.flatnonzero(count.ravel() == 0)
            if len(e):
                px = cols.ravel()[e] + centres[b, 0]
                py = rows.ravel()[e] + centres[b, 1]
                bidx, bw = bilinear_weights(px, py, wid, hgt)
                res[:, :, e] = (flat_vals[:, :, bidx] * bw).sum(axis=3)
            out[t, b] = res
    out = np.ascontiguousarray(out.transpose(2, 4, 0, 1, 3))
    return out if batched else out[0]

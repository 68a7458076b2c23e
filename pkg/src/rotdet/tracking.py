"""Multi-object tracking of rotated boxes with a constant-velocity Kalman
filter and Hungarian association on rotated IoU.

The state is ``(cx, cy, w, h, theta, v_cx, v_cy, v_theta)``.  Centre and
angle move at constant velocity; width and height drift as a random walk.
Angles are axial, so innovations are wrapped into (-90, 90] before the
update and the state angle is wrapped after it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import RotatedBox, canonicalize_array, iou_rotated_matrix, wrap_angles

STATE_DIM = 8
MEAS_DIM = 5


class SequenceError(ValueError):
    """Frames were fed to the tracker out of order."""


class Status(str, Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


@dataclass
class TrackerConfig:
    max_age: int = 3
    min_hits: int = 2
    iou_threshold: float = 0.3
    # process noise variances per frame
    q_pos: float = 0.25
    q_size: float = 0.05
    q_angle: float = 0.5
    q_vel: float = 0.05
    q_angle_vel: float = 0.05
    # measurement noise variances
    r_pos: float = 1.0
    r_size: float = 1.0
    r_angle: float = 9.0
    # prior variance of the unobserved velocities at track birth
    init_vel: float = 25.0
    init_angle_vel: float = 4.0

    def __post_init__(self):
        if self.max_age < 0 or self.min_hits < 1:
            raise ValueError("max_age must be >= 0 and min_hits >= 1")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in [0, 1]")
        for name in ("q_pos", "q_size", "q_angle", "q_vel", "q_angle_vel", "r_pos", "r_size",
                     "r_angle", "init_vel", "init_angle_vel"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def process_noise(self) -> np.ndarray:
        return np.diag([self.q_pos, self.q_pos, self.q_size, self.q_size, self.q_angle,
                        self.q_vel, self.q_vel, self.q_angle_vel])

    @property
    def measurement_noise(self) -> np.ndarray:
        return np.diag([self.r_pos, self.r_pos, self.r_size, self.r_size, self.r_angle])

    @classmethod
    def noiseless(cls, **kw) -> "TrackerConfig":
        """Zero process and measurement noise; the filter then reproduces
        exact constant-velocity motion from two observations."""
        zero = {n: 0.0 for n in ("q_pos", "q_size", "q_angle", "q_vel", "q_angle_vel",
                                 "r_pos", "r_size", "r_angle")}
        zero.update(kw)
        return cls(**zero)


def transition_matrix() -> np.ndarray:
    F = np.eye(STATE_DIM)
    F[0, 5] = F[1, 6] = F[4, 7] = 1.0
    return F


def measurement_matrix() -> np.ndarray:
    return np.eye(MEAS_DIM, STATE_DIM)


_F = transition_matrix()
_H = measurement_matrix()


@dataclass
class Track:
    id: int
    x: np.ndarray
    P: np.ndarray
    age: int = 1
    hits: int = 1
    time_since_update: int = 0
    status: Status = Status.TENTATIVE
    score: float = 1.0

    @classmethod
    def start(cls, track_id: int, box, score: float, cfg: TrackerConfig) -> "Track":
        z = np.asarray(box, dtype=float).reshape(MEAS_DIM)
        x = np.concatenate([z, np.zeros(3)])
        x[4] = wrap_angles(x[4])
        P = np.zeros((STATE_DIM, STATE_DIM))
        P[:MEAS_DIM, :MEAS_DIM] = cfg.measurement_noise
        P[5, 5] = P[6, 6] = cfg.init_vel
        P[7, 7] = cfg.init_angle_vel
        status = Status.CONFIRMED if cfg.min_hits <= 1 else Status.TENTATIVE
        return cls(track_id, x, P, status=status, score=float(score))

    @property
    def box(self) -> np.ndarray:
        return self.x[:MEAS_DIM].copy()

    def rotated_box(self) -> RotatedBox:
        return RotatedBox(*map(float, canonicalize_array(self.box[None])[0]))


def kf_predict(track: Track, cfg: TrackerConfig) -> RotatedBox:
    """Advance ``track`` by one frame in place and return its predicted box."""
    if track.status is Status.DEAD:
        raise ValueError(f"track {track.id} is dead")
    track.x = _F @ track.x
    track.x[4] = wrap_angles(track.x[4])
    track.P = _F @ track.P @ _F.T + cfg.process_noise
    track.age += 1
    track.time_since_update += 1
    return track.rotated_box()


def innovation(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Measurement residual with the angle taken as the shortest axial turn."""
    y = np.asarray(z, dtype=float) - _H @ x
    y[4] = wrap_angles(y[4])
    return y


def kf_update(track: Track, box, cfg: TrackerConfig, score: float | None = None) -> None:
    z = np.asarray(box, dtype=float).reshape(MEAS_DIM)
    R = cfg.measurement_noise
    y = innovation(track.x, z)
    S = _H @ track.P @ _H.T + R
    # pinv keeps the update defined when the noise terms are zero
    K = track.P @ _H.T @ np.linalg.pinv(S)
    track.x = track.x + K @ y
    track.x[4] = wrap_angles(track.x[4])
    A = np.eye(STATE_DIM) - K @ _H
    P = A @ track.P @ A.T + K @ R @ K.T
    track.P = 0.5 * (P + P.T)
    track.hits += 1
    track.time_since_update = 0
    if score is not None:
        track.score = float(score)
    if track.status is Status.TENTATIVE and track.hits >= cfg.min_hits:
        track.status = Status.CONFIRMED


def associate(track_boxes: np.ndarray, det_boxes: np.ndarray, iou_threshold: float = 0.3):
    """Minimum-cost assignment on ``1 - rotated IoU``.

    Returns ``(pairs, unmatched_tracks, unmatched_dets)``; assigned pairs whose
    IoU falls below ``iou_threshold`` are split back into the unmatched lists.
    """
    track_boxes = np.asarray(track_boxes, dtype=float).reshape(-1, 5)
    det_boxes = np.asarray(det_boxes, dtype=float).reshape(-1, 5)
    nt, nd = len(track_boxes), len(det_boxes)
    if nt == 0 or nd == 0:
        return np.zeros((0, 2), int), np.arange(nt), np.arange(nd)
    iou = iou_rotated_matrix(track_boxes, det_boxes)
    rows, cols = linear_sum_assignment(1.0 - iou)
    ok = iou[rows, cols] >= iou_threshold
    pairs = np.stack([rows[ok], cols[ok]], axis=1)
    um_t = np.setdiff1d(np.arange(nt), pairs[:, 0])
    um_d = np.setdiff1d(np.arange(nd), pairs[:, 1])
    return pairs, um_t, um_d


@dataclass
class TrackedBox:
    track_id: int
    box: np.ndarray
    score: float
    recovered: bool = False
    detection: int = -1  # index into the frame's detections, -1 when recovered

    def to_record(self, frame: int) -> dict:
        cx, cy, w, h, th = map(float, self.box)
        return {"frame": int(frame), "track_id": int(self.track_id), "cx": cx, "cy": cy, "w": w, "h": h,
                "theta_deg": th, "score": float(self.score), "recovered": bool(self.recovered)}


@dataclass
class FrameResult:
    frame: int
    boxes: list[TrackedBox] = field(default_factory=list)

    def detections(self) -> list[TrackedBox]:
        return [b for b in self.boxes if not b.recovered]

    def recovered(self) -> list[TrackedBox]:
        return [b for b in self.boxes if b.recovered]


class Tracker:
    """Ordered state machine: feed one frame of detections per :meth:`step`."""

    def __init__(self, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self.tracks: list[Track] = []
        self.next_id = 1
        self.last_frame: int | None = None

    def step(self, frame: int, boxes, scores=None) -> FrameResult:
        if self.last_frame is not None and frame <= self.last_frame:
            raise SequenceError(f"frame {frame} after frame {self.last_frame}")
        self.last_frame = frame
        cfg = self.cfg
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
        scores = np.ones(len(boxes)) if scores is None else np.asarray(scores, dtype=float)

        predicted = np.array([kf_predict(t, cfg).as_tuple() for t in self.tracks]).reshape(-1, 5)
        pairs, um_t, um_d = associate(predicted, boxes, cfg.iou_threshold)
        out = FrameResult(frame)
        for ti, di in pairs:
            t = self.tracks[ti]
            kf_update(t, boxes[di], cfg, scores[di])
            out.boxes.append(TrackedBox(t.id, boxes[di].copy(), float(scores[di]), False, int(di)))
        for ti in um_t:
            t = self.tracks[ti]
            if t.time_since_update > cfg.max_age:
                t.status = Status.DEAD
            elif t.status is Status.CONFIRMED:
                out.boxes.append(TrackedBox(t.id, predicted[ti].copy(), t.score, True))
        for di in um_d:
            t = Track.start(self.next_id, boxes[di], scores[di], cfg)
            self.next_id += 1
            self.tracks.append(t)
            out.boxes.append(TrackedBox(t.id, boxes[di].copy(), float(scores[di]), False, int(di)))
        self.tracks = [t for t in self.tracks if t.status is not Status.DEAD]
        out.boxes.sort(key=lambda b: (b.recovered, b.detection if not b.recovered else b.track_id))
        return out


def run_tracker(frames, cfg: TrackerConfig | None = None) -> list[FrameResult]:
    """Track a sequence given as ``(frame_index, boxes, scores)`` triples."""
    tracker = Tracker(cfg)
    return [tracker.step(f, b, s) for f, b, s in frames]


def detect_by_tracking(results: list[FrameResult]):
    """Per frame, the input detections followed by boxes recovered from
    confirmed tracks that had no detection.

    Returns a list of ``(boxes (M, 5), scores (M,), recovered (M,) bool)``.
    """
    out = []
    for r in results:
        dets = sorted(r.detections(), key=lambda b: b.detection)
        rec = r.recovered()
        items = dets + rec
        boxes = np.array([b.box for b in items], dtype=float).reshape(-1, 5)
        scores = np.array([b.score for b in items], dtype=float)
        flags = np.array([b.recovered for b in items], dtype=bool)
        out.append((boxes, scores, flags))
    return out

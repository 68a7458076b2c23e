"""A small differentiable two-stage detection head.

Each stage is a 1x1 linear map from the input feature channels to a
``k*k*(C+1)`` classification stack and an ``8*k*k`` regression stack.  Scores
come from position-sensitive pooling of those stacks over a rotated RoI.

Because the map is linear and pooling averages, pooling the stacks equals
applying the per-bin weights to pooled *input* features, so the heads work on
``(R, k*k, F)`` pooled features and never materialise the stacks.
:meth:`ToyModel.score_maps` builds them explicitly for inspection and tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import HyperParams, joint_loss, rdn_loss_grad, rrpn_loss_grad
from .pooling import ScoreMapStack, softmax_scores

HEADS = ("rpn", "rdn")
N_REG = 8


class ToyModel:
    def __init__(self, n_features: int = 2, k: int = 3, n_classes: int = 1, params=None):
        self.n_features = n_features
        self.k = k
        self.n_classes = n_classes
        kk = k * k
        nc = kk * (n_classes + 1)
        nr = kk * N_REG
        self.shapes = {}
        for head in HEADS:
            self.shapes[f"{head}_cls_w"] = (nc, n_features)
            self.shapes[f"{head}_cls_b"] = (nc,)
            self.shapes[f"{head}_reg_w"] = (nr, n_features)
            self.shapes[f"{head}_reg_b"] = (nr,)
        self.slices = {}
        off = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.slices[name] = slice(off, off + size)
            off += size
        self.size = off
        if params is None:
            params = np.zeros(off)
        params = np.array(params, dtype=float)
        if params.shape != (off,):
            raise ValueError(f"expected {off} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.params = params
        self.velocity = np.zeros(off)

    @classmethod
    def init(cls, rng: np.random.Generator, std: float = 0.01, **kw) -> "ToyModel":
        """Gaussian weights, zero biases."""
        m = cls(**kw)
        for name in m.shapes:
            if name.endswith("_w"):
                m.params[m.slices[name]] = rng.normal(0.0, std, m.slices[name].stop - m.slices[name].start)
        return m

    def view(self, name: str, arr=None) -> np.ndarray:
        arr = self.params if arr is None else arr
        return arr[self.slices[name]].reshape(self.shapes[name])

    # -- forward / backward on pooled input features ---------------------

    def forward(self, head: str, pooled: np.ndarray):
        """Logits ``(R, C+1)`` and regression outputs ``(R, 8)``."""
        kk = self.k * self.k
        F = self.n_features
        wc = self.view(f"{head}_cls_w").reshape(-1, kk, F)
        bc = self.view(f"{head}_cls_b").reshape(-1, kk)
        wr = self.view(f"{head}_reg_w").reshape(N_REG, kk, F)
        br = self.view(f"{head}_reg_b").reshape(N_REG, kk)
        P = pooled.reshape(len(pooled), -1)  # (R, kk*F)
        z = P @ wc.reshape(len(wc), -1).T + bc.sum(axis=1)
        q = (P @ wr.reshape(N_REG, -1).T + br.sum(axis=1)) / kk
        return z, q

    def backward(self, head: str, pooled: np.ndarray, dz: np.ndarray, dq: np.ndarray,
                 grad: np.ndarray) -> None:
        """Accumulate parameter gradients of a head into ``grad``."""
        kk = self.k * self.k
        P = pooled.reshape(len(pooled), -1)
        gwc = dz.T @ P  # (C+1, kk*F)
        grad[self.slices[f"{head}_cls_w"]] += gwc.ravel()
        grad[self.slices[f"{head}_cls_b"]] += np.repeat(dz.sum(axis=0), kk)
        gwr = dq.T @ P / kk
        grad[self.slices[f"{head}_reg_w"]] += gwr.ravel()
        grad[self.slices[f"{head}_reg_b"]] += np.repeat(dq.sum(axis=0) / kk, kk)

    def predict(self, head: str, pooled: np.ndarray):
        """Foreground probability per RoI and regression outputs."""
        z, q = self.forward(head, pooled)
        return softmax_scores(z)[:, 1:].max(axis=1) if self.n_classes > 1 else softmax_scores(z)[:, 1], q

    def score_maps(self, head: str, features: np.ndarray):
        """Explicit classification and regression stacks for a feature grid."""
        F, h, w = features.shape
        x = features.reshape(F, -1).astype(float)
        cls = self.view(f"{head}_cls_w") @ x + self.view(f"{head}_cls_b")[:, None]
        reg = self.view(f"{head}_reg_w") @ x + self.view(f"{head}_reg_b")[:, None]
        return ScoreMapStack(cls.reshape(-1, h, w)), ScoreMapStack(reg.reshape(-1, h, w))

    # -- persistence ------------------------------------------------------

    def to_dict(self, extra: dict | None = None) -> dict:
        d = {"n_features": self.n_features, "k": self.k, "n_classes": self.n_classes,
             "params": self.params.tolist()}
        if extra:
            d["extra"] = extra
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModel":
        return cls(d["n_features"], d["k"], d["n_classes"], d["params"])

    def save(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(extra), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls.from_dict(d), d.get("extra", {})


@dataclass
class StageBatch:
    """Pooled features and supervision for one stage of one image."""

    pooled: np.ndarray  # (R, kk, F)
    labels: np.ndarray  # (R,) int
    targets: np.ndarray  # (R, 8)
    phi: np.ndarray  # (R,)

    @classmethod
    def empty(cls, kk: int, F: int) -> "StageBatch":
        return cls(np.zeros((0, kk, F)), np.zeros(0, int), np.zeros((0, N_REG)), np.zeros(0))


@dataclass
class ImageBatch:
    rpn: StageBatch
    rdn: StageBatch


@dataclass
class LossReport:
    joint: float
    l1: list = field(default_factory=list)
    l2: list = field(default_factory=list)


def _stage(model: ToyModel, head: str, sb: StageBatch, hp: HyperParams, grad):
    if len(sb.labels) == 0:
        return 0.0
    z, q = model.forward(head, sb.pooled)
    fn = rrpn_loss_grad if head == "rpn" else rdn_loss_grad
    value, dz, dq = fn(z, q, sb.labels, sb.targets, sb.phi, hp)
    if grad is not None:
        scale = 1.0 if head == "rpn" else hp.eta
        model.backward(head, sb.pooled, scale * dz, scale * dq, grad)
    return value


def loss_and_grad(model: ToyModel, batch: list[ImageBatch], hp: HyperParams, need_grad: bool = True):
    """Joint loss over a mini-batch and its gradient without the decay term.

    The RoI sets inside ``batch`` are held fixed, so the gradient is that of
    the loss with respect to the head parameters for this RoI selection.
    """
    grad = np.zeros(model.size) if need_grad else None
    l1 = [_stage(model, "rpn", ib.rpn, hp, grad) for ib in batch]
    l2 = [_stage(model, "rdn", ib.rdn, hp, grad) for ib in batch]
    report = LossReport(joint_loss(l1, l2, model, hp), l1, l2)
    return report, grad


def full_gradient(model: ToyModel, batch: list[ImageBatch], hp: HyperParams) -> np.ndarray:
    """Gradient of the joint loss including the decay term."""
    _, g = loss_and_grad(model, batch, hp)
    return g + 2.0 * hp.phi_decay * model.params


def grad_check(model: ToyModel, batch: list[ImageBatch], hp: HyperParams, n_params: int = 100,
               rng: np.random.Generator | None = None, step: float = 1e-5,
               floor: float = 1e-8) -> float:
    """Largest relative error between analytic and central-difference
    gradients over a random sample of parameters.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng or np.random.default_rng(0)
    analytic = full_gradient(model, batch, hp)
    idx = rng.choice(model.size, size=min(n_params, model.size), replace=False)
    saved = model.params.copy()
    worst = 0.0
    try:
        for i in idx:
            model.params[i] = saved[i] + step
            fp = loss_and_grad(model, batch, hp, need_grad=False)[0].joint
            model.params[i] = saved[i] - step
            fm = loss_and_grad(model, batch, hp, need_grad=False)[0].joint
            model.params[i] = saved[i]
            num = (fp - fm) / (2 * step)
            err = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), floor)
            worst = max(worst, err)
    finally:
        model.params[:] = saved
    return worst

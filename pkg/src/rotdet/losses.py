"""Detection losses, their gradients and the momentum SGD update."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

PROB_FLOOR = 1e-12


class DomainError(ValueError):
    pass


@dataclass
class HyperParams:
    lambda1: float = 10.0
    lambda2: float = 1.0
    eta: float = 1.0
    n_cls: float = 64.0
    n_reg: float = 1000.0
    phi_decay: float = 0.0005
    lr: float = 0.001
    lr_step: int = 10000
    lr_gamma: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "eta", "phi_decay", "momentum", "lr_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_cls <= 0 or self.n_reg <= 0:
            raise ValueError("normalizers must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, iteration: int) -> float:
        """Step schedule: ``lr`` multiplied by ``lr_gamma`` every ``lr_step`` iterations."""
        if self.lr_step <= 0:
            return self.lr
        return self.lr * self.lr_gamma ** (iteration // self.lr_step)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """Flat ``name = value`` lines, one per field."""
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "HyperParams":
        """Parse ``name = value`` lines; blank lines and ``#`` comments are skipped."""
        return cls.from_dict(parse_key_values(text))

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise KeyError(f"unknown hyper-parameter {k!r}")
            kw[k] = int(v) if k in ("lr_step", "batch_size") else float(v)
        return cls(**kw)


def parse_key_values(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'name = value'")
        k, v = (part.strip() for part in line.split("=", 1))
        out[k] = v
    return out


def _onehot(labels, shape: tuple) -> np.ndarray:
    """One-hot rows when ``labels`` already has the prediction's shape,
    otherwise integer class indices."""
    labels = np.asarray(labels)
    if labels.shape == tuple(shape):
        return labels.astype(float)
    return np.eye(shape[-1])[labels.astype(int)]


def cls_loss(p, p_hat) -> np.ndarray | float:
    """Cross-entropy ``-sum p_hat log p`` over the last axis.

    ``p_hat`` may be one-hot rows or integer labels.  Probabilities are
    clamped at ``PROB_FLOOR`` before the logarithm.
    """
    p = np.asarray(p, dtype=float)
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6) or np.any(p < 0):
        raise DomainError("probabilities must be non-negative and sum to 1")
    y = _onehot(p_hat, p.shape)
    out = -(y * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cls_loss_logits(z, p_hat):
    """Cross-entropy of ``softmax(z)`` and its gradient with respect to ``z``.

    Uses the clamped probabilities so the value agrees with :func:`cls_loss`.
    """
    z = np.asarray(z, dtype=float)
    y = _onehot(p_hat, z.shape)
    lp = log_softmax(z)
    p = np.exp(lp)
    loss = -(y * np.maximum(lp, np.log(PROB_FLOOR))).sum(axis=-1)
    # the clamp is flat below the floor, so clamped entries carry no gradient
    active = lp > np.log(PROB_FLOOR)
    gy = y * active
    grad = p * gy.sum(axis=-1, keepdims=True) - gy
    return loss, grad


def smooth_l1(x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _check_shapes(probs, t, labels, t_hat, phi):
    probs = np.asarray(probs, dtype=float).reshape(len(probs), -1)
    t = np.asarray(t, dtype=float).reshape(len(t), -1)
    t_hat = np.asarray(t_hat, dtype=float).reshape(len(t_hat), -1)
    labels = np.asarray(labels)
    phi = np.asarray(phi, dtype=float)
    n = len(probs)
    if not (len(t) == len(labels) == len(t_hat) == len(phi) == n) or t.shape != t_hat.shape:
        raise ValueError("prediction and label shapes disagree")
    return probs, t, labels, t_hat, phi


def rrpn_loss(probs, t, labels, t_hat, phi, hp: HyperParams) -> float:
    """Proposal-stage loss for one image's sampled anchors.

    ``(1/N_cls) sum L_cls + lambda1 (1/N_reg) sum phi L_reg``.
    """
    probs, t, labels, t_hat, phi = _check_shapes(probs, t, labels, t_hat, phi)
    lc = np.sum(cls_loss(probs, labels)) if len(probs) else 0.0
    lr = float(np.sum(phi[:, None] * smooth_l1(t - t_hat))) if len(t) else 0.0
    return float(lc / hp.n_cls + hp.lambda1 * lr / hp.n_reg)


def rdn_loss(probs, t, labels, t_hat, phi, hp: HyperParams) -> float:
    """Detection-stage loss over RoIs: unnormalized sums, weight ``lambda2``."""
    probs, t, labels, t_hat, phi = _check_shapes(probs, t, labels, t_hat, phi)
    lc = np.sum(cls_loss(probs, labels)) if len(probs) else 0.0
    lr = float(np.sum(phi[:, None] * smooth_l1(t - t_hat))) if len(t) else 0.0
    return float(lc + hp.lambda2 * lr)


def stage_loss_grad(z, t, labels, t_hat, phi, cls_weight: float, reg_weight: float):
    """Value and gradients of ``cls_weight * sum CE + reg_weight * sum phi R``
    with respect to logits ``z`` and regression outputs ``t``."""
    ce, gz = cls_loss_logits(z, labels)
    d = np.asarray(t, dtype=float) - np.asarray(t_hat, dtype=float)
    phi = np.asarray(phi, dtype=float)[:, None]
    value = cls_weight * ce.sum() + reg_weight * np.sum(phi * smooth_l1(d))
    return float(value), cls_weight * gz, reg_weight * phi * smooth_l1_grad(d)


def rrpn_loss_grad(z, t, labels, t_hat, phi, hp: HyperParams):
    return stage_loss_grad(z, t, labels, t_hat, phi, 1.0 / hp.n_cls, hp.lambda1 / hp.n_reg)


def rdn_loss_grad(z, t, labels, t_hat, phi, hp: HyperParams):
    return stage_loss_grad(z, t, labels, t_hat, phi, 1.0, hp.lambda2)


def _params(w) -> np.ndarray:
    return np.asarray(w.params if hasattr(w, "params") else w, dtype=float)


def joint_loss(l1_terms, l2_terms, w, hp: HyperParams) -> float:
    """Batch sum of proposal losses, ``eta`` times the detection losses, plus decay."""
    p = _params(w)
    return float(np.sum(l1_terms) + hp.eta * np.sum(l2_terms) + hp.phi_decay * np.dot(p, p))


def sgd_step(w, grad, hp: HyperParams, lr: float | None = None, velocity=None):
    """One momentum step on the decay-free gradient ``grad``.

    The decay gradient ``2 phi w`` is added here.  ``w`` is a model with
    ``params`` and ``velocity`` arrays (updated in place and returned) or a
    plain array, in which case ``velocity`` may be passed and
    ``(w, velocity)`` is returned.
    """
    lr = hp.lr if lr is None else lr
    grad = np.asarray(grad, dtype=float)
    if hasattr(w, "params"):
        if grad.shape != w.params.shape:
            raise ValueError("gradient shape does not match parameters")
        w.velocity *= hp.momentum
        w.velocity += grad + 2.0 * hp.phi_decay * w.params
        w.params -= lr * w.velocity
        return w
    p = np.array(w, dtype=float)
    if grad.shape != p.shape:
        raise ValueError("gradient shape does not match parameters")
    v = np.zeros_like(p) if velocity is None else np.asarray(velocity, dtype=float)
    v = hp.momentum * v + grad + 2.0 * hp.phi_decay * p
    return p - lr * v, v

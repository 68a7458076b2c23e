import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rotdet.losses import (
    DomainError,
    HyperParams,
    cls_loss,
    cls_loss_logits,
    joint_loss,
    log_softmax,
    rdn_loss,
    rdn_loss_grad,
    rrpn_loss,
    rrpn_loss_grad,
    sgd_step,
    smooth_l1,
    smooth_l1_grad,
)


def test_cls_loss_examples():
    assert cls_loss([0.0, 1.0], [0, 1]) == pytest.approx(0.0, abs=1e-9)
    assert cls_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))
    assert cls_loss([0.5, 0.5], 1) == pytest.approx(0.693147, abs=1e-6)
    # a wrong confident prediction is capped by the clamp
    assert cls_loss([1.0, 0.0], [0, 1]) == pytest.approx(-math.log(1e-12))


def test_cls_loss_rejects_unnormalised():
    with pytest.raises(DomainError):
        cls_loss([0.5, 0.6], [0, 1])
    with pytest.raises(DomainError):
        cls_loss([1.2, -0.2], [1, 0])


def test_cls_loss_logits_gradient_matches_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 2))
    y = rng.integers(0, 2, 6)
    _, g = cls_loss_logits(z, y)
    h = 1e-6
    for r in range(6):
        for c in range(2):
            zp, zm = z.copy(), z.copy()
            zp[r, c] += h
            zm[r, c] -= h
            num = (cls_loss_logits(zp, y)[0][r] - cls_loss_logits(zm, y)[0][r]) / (2 * h)
            assert g[r, c] == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_cls_loss_logits_agrees_with_probabilities():
    z = np.array([[0.3, -1.2], [4.0, 2.0]])
    y = np.array([1, 0])
    p = np.exp(log_softmax(z))
    assert np.allclose(cls_loss_logits(z, y)[0], cls_loss(p, y))


def test_smooth_l1_examples():
    assert smooth_l1(0.0) == 0.0
    assert smooth_l1(0.5) == pytest.approx(0.125)
    assert smooth_l1(2.0) == pytest.approx(1.5)
    assert smooth_l1(1.0) == pytest.approx(0.5)
    assert smooth_l1(1.0 - 1e-12) == pytest.approx(0.5)
    assert smooth_l1_grad(np.array([-3.0, -1.0, 0.2, 1.0]))[[0, 2]].tolist() == [-1.0, 0.2]
    assert abs(smooth_l1_grad(1.0 - 1e-12)) == pytest.approx(1.0)
    assert smooth_l1_grad(1.0) == 1.0


@given(arrays(float, 20, elements=st.floats(-50, 50)))
def test_smooth_l1_nonnegative_and_bounded_by_abs(x):
    v = smooth_l1(x)
    assert np.all(v >= 0)
    assert np.all(v <= np.abs(x) + 1e-12)


def _stage_oracle(probs, t, labels, t_hat, phi, cw, rw):
    """Explicit double loop: classification pass, then regression pass."""
    total = 0.0
    for r in range(len(probs)):
        total += cw * -math.log(max(probs[r][labels[r]], 1e-12))
    for r in range(len(t)):
        for d in range(8):
            x = t[r][d] - t_hat[r][d]
            total += rw * phi[r] * (0.5 * x * x if abs(x) < 1 else abs(x) - 0.5)
    return total


def _random_stage(rng, n=20):
    z = rng.normal(size=(n, 2))
    probs = np.exp(log_softmax(z))
    labels = rng.integers(0, 2, n)
    t = rng.normal(0, 1.5, (n, 8))
    t_hat = rng.normal(0, 1.5, (n, 8))
    return probs, t, labels, t_hat, labels.astype(float)


def test_rrpn_loss_examples():
    hp = HyperParams()
    perfect = rrpn_loss([[0.0, 1.0]], np.zeros((1, 8)), [1], np.zeros((1, 8)), [1.0], hp)
    assert perfect == pytest.approx(0.0, abs=1e-9)
    t = np.zeros((1, 8))
    t[0, 0] = 1.0
    val = rrpn_loss([[0.0, 1.0]], t, [1], np.zeros((1, 8)), [1.0], hp)
    assert val == pytest.approx(hp.lambda1 * 0.5 / hp.n_reg)


def test_rrpn_loss_matches_oracle():
    rng = np.random.default_rng(1)
    hp = HyperParams()
    args = _random_stage(rng)
    want = _stage_oracle(*args, 1 / hp.n_cls, hp.lambda1 / hp.n_reg)
    assert rrpn_loss(*args, hp) == pytest.approx(want, abs=1e-9)


def test_rdn_loss_examples_and_oracle():
    hp = HyperParams(lambda2=3.0)
    assert rdn_loss([[1.0, 0.0]], np.zeros((1, 8)), [0], np.zeros((1, 8)), [0.0], hp) == pytest.approx(0, abs=1e-9)
    t = np.zeros((1, 8))
    t[0, 5] = -1.0
    assert rdn_loss([[0.0, 1.0]], t, [1], np.zeros((1, 8)), [1.0], hp) == pytest.approx(1.5)
    rng = np.random.default_rng(2)
    args = _random_stage(rng)
    assert rdn_loss(*args, hp) == pytest.approx(_stage_oracle(*args, 1.0, 3.0), abs=1e-9)


def test_stage_losses_reject_shape_mismatch():
    with pytest.raises(ValueError):
        rrpn_loss([[0.5, 0.5]], np.zeros((2, 8)), [1], np.zeros((1, 8)), [1.0], HyperParams())


def test_stage_gradients_match_values():
    rng = np.random.default_rng(3)
    hp = HyperParams()
    z = rng.normal(size=(7, 2))
    q = rng.normal(0, 1.5, (7, 8))
    labels = rng.integers(0, 2, 7)
    t_hat = rng.normal(0, 1.5, (7, 8))
    phi = labels.astype(float)
    for fn, ref in ((rrpn_loss_grad, rrpn_loss), (rdn_loss_grad, rdn_loss)):
        value, dz, dq = fn(z, q, labels, t_hat, phi, hp)
        assert value == pytest.approx(ref(np.exp(log_softmax(z)), q, labels, t_hat, phi, hp))
        h = 1e-6
        for idx in [(0, 0), (3, 1), (6, 0)]:
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            num = (fn(zp, q, labels, t_hat, phi, hp)[0] - fn(zm, q, labels, t_hat, phi, hp)[0]) / (2 * h)
            assert dz[idx] == pytest.approx(num, rel=1e-5, abs=1e-10)
        for idx in [(1, 2), (4, 7)]:
            qp, qm = q.copy(), q.copy()
            qp[idx] += h
            qm[idx] -= h
            num = (fn(z, qp, labels, t_hat, phi, hp)[0] - fn(z, qm, labels, t_hat, phi, hp)[0]) / (2 * h)
            assert dq[idx] == pytest.approx(num, rel=1e-5, abs=1e-10)


def test_joint_loss_examples():
    hp = HyperParams()
    assert joint_loss([0.0], [0.0], np.zeros(5), hp) == 0.0
    w = np.array([2.0, 0.0])
    assert joint_loss([1.0], [2.0], w, hp) == pytest.approx(3.002)


@given(st.lists(st.floats(0, 10), min_size=2, max_size=8), st.lists(st.floats(0, 10), min_size=2, max_size=8),
       st.integers(1, 7))
def test_joint_loss_additive_over_partition(l1, l2, cut):
    hp = HyperParams(eta=0.7)
    w = np.zeros(3)
    whole = joint_loss(l1, l2, w, hp)
    a = joint_loss(l1[:cut], l2[:cut], w, hp)
    b = joint_loss(l1[cut:], l2[cut:], w, hp)
    assert whole == pytest.approx(a + b, abs=1e-9)


def test_sgd_step_examples():
    hp = HyperParams(phi_decay=0.0, momentum=0.0, lr=0.1)
    w, v = sgd_step(np.array([1.0]), np.array([0.5]), hp)
    assert w[0] == pytest.approx(0.95)
    w, v = sgd_step(np.array([1.0, -2.0]), np.zeros(2), HyperParams(phi_decay=0.0))
    assert w.tolist() == [1.0, -2.0]


def test_sgd_step_decay_and_momentum():
    hp = HyperParams(phi_decay=0.5, momentum=0.9, lr=0.1)
    w, v = sgd_step(np.array([2.0]), np.array([1.0]), hp, velocity=np.array([1.0]))
    # v = 0.9 * 1 + 1 + 2 * 0.5 * 2 = 3.9
    assert v[0] == pytest.approx(3.9)
    assert w[0] == pytest.approx(2.0 - 0.39)


def test_sgd_minimises_convex_quadratic():
    # f(w) = 0.5 (w - c)' A (w - c) plus decay; closed-form optimum solves (A + 2 phi I) w = A c
    rng = np.random.default_rng(4)
    m = rng.normal(size=(4, 4))
    A = m @ m.T + np.eye(4)
    c = rng.normal(size=4)
    phi = 0.01
    opt = np.linalg.solve(A + 2 * phi * np.eye(4), A @ c)
    # heavy-ball step and momentum tuned to the curvature range of A + 2 phi I
    ev = np.linalg.eigvalsh(A + 2 * phi * np.eye(4))
    sl, sm = np.sqrt(ev.max()), np.sqrt(ev.min())
    hp = HyperParams(lr=4 / (sl + sm) ** 2, momentum=((sl - sm) / (sl + sm)) ** 2, phi_decay=phi)
    w, v = np.zeros(4), np.zeros(4)
    for _ in range(200):
        w, v = sgd_step(w, A @ (w - c), hp, velocity=v)
    assert np.max(np.abs(w - opt)) < 1e-6


def test_hyperparams_defaults_and_schedule():
    hp = HyperParams()
    assert (hp.lambda1, hp.lambda2, hp.eta, hp.n_cls, hp.n_reg) == (10, 1, 1, 64, 1000)
    assert (hp.lr, hp.momentum, hp.phi_decay, hp.batch_size) == (0.001, 0.9, 0.0005, 32)
    assert hp.lr_at(9999) == 0.001
    assert hp.lr_at(10000) == pytest.approx(0.0001)


def test_hyperparams_text_round_trip():
    hp = HyperParams(lr=0.003, batch_size=4, eta=0.5)
    assert HyperParams.from_text(hp.to_text()) == hp
    parsed = HyperParams.from_text("# tuned\nlambda2 = 10\n\nlr=0.01  # faster\n")
    assert parsed.lambda2 == 10 and parsed.lr == 0.01
    with pytest.raises(KeyError):
        HyperParams.from_text("gamma = 3")
    with pytest.raises(ValueError):
        HyperParams.from_text("lr 0.1")


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        HyperParams(lr=0)
    with pytest.raises(ValueError):
        HyperParams(eta=-1)
    with pytest.raises(ValueError):
        HyperParams(n_reg=0)

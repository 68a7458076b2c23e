import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import axis_iou, random_canonical_box
from rotdet.anchors import AnchorConfig, BatchStats, generate_anchors
from rotdet.boxcodec import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    InvalidNormalizerError,
    RegressTarget,
    decode,
    decode_array,
    encode,
    encode_array,
    match,
    match_arrays,
    sample_labels,
)
from rotdet.geometry import QuadBox, RotatedBox, quads_from_array, to_quad


def quad(box):
    return to_quad(RotatedBox(*box))


def test_identity_is_zero():
    q = quad((3, 4, 2, 6, 30))
    t = encode(q, q, 2.0, 6.0)
    assert np.all(t.as_array() == 0)


def test_uniform_shift():
    q = quad((3, 4, 2, 6, 30))
    moved = QuadBox(tuple(x + 2.0 for x in q.xs), q.ys)
    t = encode(q, moved, 2.0, 6.0)
    assert np.allclose(t.tx, 1.0) and np.allclose(t.ty, 0.0)


def test_decode_zero_and_shift():
    q = quad((0, 0, 2, 4, 10))
    z = decode(q, RegressTarget((0,) * 4, (0,) * 4), 3.0, 5.0)
    assert np.allclose(z.as_array(), q.as_array())
    s = decode(q, RegressTarget((1,) * 4, (0,) * 4), 3.0, 5.0)
    assert np.allclose(s.as_array()[:4], q.as_array()[:4] + 3.0)
    assert np.allclose(s.as_array()[4:], q.as_array()[4:])


def test_bad_normalizer():
    q = quad((0, 0, 2, 4, 10))
    with pytest.raises(InvalidNormalizerError):
        encode(q, q, 0.0, 1.0)
    with pytest.raises(InvalidNormalizerError):
        decode(q, RegressTarget((0,) * 4, (0,) * 4), 1.0, -2.0)


def test_round_trip_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(300):
        a = quad(random_canonical_box(rng))
        g = quad(random_canonical_box(rng))
        kw, kh = rng.uniform(0.5, 20, 2)
        t = encode(a, g, kw, kh)
        back = decode(a, t, kw, kh)
        assert np.max(np.abs(back.as_array() - g.as_array())) < 1e-9
        # encode after decode of a random t gives the same t back
        t2 = RegressTarget.from_array(rng.normal(size=8))
        r = decode_array(a.as_array(), t2.as_array(), kw, kh)
        assert np.max(np.abs(encode_array(a.as_array(), r, kw, kh) - t2.as_array())) < 1e-9


def test_encode_reorders_shuffled_vertices():
    a = quad((0, 0, 2, 4, 20))
    g = quad((1, 1, 3, 5, 25))
    pts = g.vertices[[2, 0, 3, 1]]
    shuffled = QuadBox.from_points(pts)
    assert np.allclose(encode(a, shuffled, 2, 4).as_array(), encode(a, g, 2, 4).as_array())


@settings(max_examples=50, deadline=None)
@given(
    dx=st.floats(-100, 100), dy=st.floats(-100, 100), s=st.floats(0.1, 10),
    seed=st.integers(0, 10**6),
)
def test_translation_and_scale(dx, dy, s, seed):
    rng = np.random.default_rng(seed)
    a = quads_from_array(np.array([random_canonical_box(rng)]))
    g = quads_from_array(np.array([random_canonical_box(rng)]))
    t = encode_array(a, g, 2.0, 3.0)
    shift = np.array([dx] * 4 + [dy] * 4)
    t2 = encode_array(a + shift, g + shift, 2.0, 3.0)
    assert np.allclose(t, t2, atol=1e-9 * (1 + abs(dx) + abs(dy)))
    assert np.allclose(encode_array(a, g, 2.0 * s, 3.0 * s), t / s, rtol=1e-12, atol=1e-12)


def test_match_identical_and_disjoint():
    gts = [RotatedBox(10, 10, 4, 8, 0)]
    anchors = np.array([[10, 10, 4, 8, 0], [100, 100, 4, 8, 0]], float)
    m = match(anchors, gts)
    assert list(m.labels) == [POSITIVE, NEGATIVE]
    assert list(m.phi) == [1, 0]
    assert list(m.matched) == [0, -1]


def test_match_against_pairwise_oracle():
    rng = np.random.default_rng(5)
    gts = np.array([random_canonical_box(rng, 0, 60) for _ in range(5)])
    anchors = np.array([random_canonical_box(rng, 0, 60) for _ in range(200)])
    # nudge some anchors onto gts so positives exist
    anchors[:40] = gts[rng.integers(0, 5, 40)] + rng.normal(0, 1.0, (40, 5)) * [1, 1, 0, 0, 3]
    anchors[:40, 4] = np.clip(anchors[:40, 4], -89, 90)
    m = match_arrays(anchors, gts)
    for n, a in enumerate(anchors):
        ious = [axis_iou(a, g) for g in gts]
        best = max(ious)
        idx = ious.index(best)
        want = POSITIVE if best >= 0.5 else (IGNORE if best >= 0.3 else NEGATIVE)
        assert m.labels[n] == want
        assert abs(m.max_iou[n] - best) < 1e-9
        if want == POSITIVE:
            assert m.matched[n] == idx and m.phi[n] == 1
        else:
            assert m.matched[n] == -1 and m.phi[n] == 0
    assert np.count_nonzero(m.labels == POSITIVE) > 5


def test_match_tie_uses_lowest_index_and_order_invariance():
    gts = np.array([[10, 10, 4, 8, 0], [10, 10, 4, 8, 0], [40, 40, 4, 8, 0]], float)
    anchors = np.array([[10, 10, 4, 8, 0], [40, 40, 4, 8, 0], [0, 90, 2, 2, 0]], float)
    m = match_arrays(anchors, gts)
    assert list(m.matched[:2]) == [0, 2]
    perm = [2, 0, 1]
    m2 = match_arrays(anchors, gts[perm])
    assert list(m2.labels) == list(m.labels)


def test_match_without_gts_and_bad_threshold():
    m = match_arrays(np.array([[0, 0, 1, 2, 0]], float), np.zeros((0, 5)))
    assert list(m.labels) == [NEGATIVE]
    with pytest.raises(ValueError):
        match_arrays(np.zeros((1, 5)), np.zeros((1, 5)), pos_threshold=1.0)


def test_match_anchor_set():
    a = generate_anchors(AnchorConfig(grid_w=8, grid_h=8, feature_stride=4), BatchStats(4, 8, 1))
    m = match(a, [RotatedBox(14, 14, 4, 8, 90)])
    assert len(m.labels) == len(a)
    pos = np.flatnonzero(m.labels == POSITIVE)
    assert len(pos) >= 1
    assert np.all(m.matched[pos] == 0)


def test_sampling_ratio():
    rng = np.random.default_rng(0)
    labels = np.array([POSITIVE] * 50 + [NEGATIVE] * 500 + [IGNORE] * 20)
    idx = sample_labels(labels, 64, rng=rng)
    assert len(idx) == 64
    assert np.count_nonzero(labels[idx] == POSITIVE) == 16
    assert np.count_nonzero(labels[idx] == IGNORE) == 0
    assert len(set(idx)) == 64
    few = np.array([POSITIVE] * 3 + [NEGATIVE] * 500)
    idx = sample_labels(few, 64, rng=rng)
    assert np.count_nonzero(few[idx] == POSITIVE) == 3 and len(idx) == 64

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from depthstab.core import DisparityMap, FlowField, Frame
from depthstab.flowops import (compose_flows, flow_consistency_mask, flow_magnitude, relevance_map,
                               visibility_mask, warp_backward, warp_labels)

from oracles import warp as warp_oracle


def ramp(h=6, w=8):
    return np.tile(np.arange(w, dtype=float), (h, 1))


def uniform(shape, u, v=0.0):
    return FlowField(np.full(shape, float(u)), np.full(shape, float(v)))


def test_zero_flow_is_identity():
    d = DisparityMap(np.random.default_rng(0).random((6, 7)))
    out = warp_backward(d, FlowField.zeros((6, 7)))
    assert np.array_equal(out.values, d.values)
    assert out.valid.all()


def test_zero_flow_keeps_invalid_pixels_invalid():
    vals = np.random.default_rng(0).random((5, 5))
    valid = np.ones((5, 5), bool)
    valid[2, 3] = False
    out = warp_backward(DisparityMap(vals, valid), FlowField.zeros((5, 5)))
    assert np.array_equal(out.valid, valid)


def test_uniform_shift_on_ramp():
    out, ok = warp_backward(ramp(), uniform((6, 8), 1.0))
    assert np.allclose(out[:, :-1], ramp()[:, 1:])
    assert ok[:, :-1].all() and not ok[:, -1].any()


def test_shift_beyond_width_invalidates_everything():
    _, ok = warp_backward(ramp(), uniform((6, 8), 9.0))
    assert not ok.any()


def test_frame_warp_returns_frame_with_mask():
    f = Frame(np.random.default_rng(1).random((6, 8, 3)), 3)
    out = warp_backward(f, uniform((6, 8), -1.0))
    assert isinstance(out, Frame) and out.index == 3
    assert np.allclose(out.rgb[:, 1:], f.rgb[:, :-1])
    assert not out.valid[:, 0].any()


def test_warp_shape_mismatch():
    with pytest.raises(ValueError):
        warp_backward(ramp(), FlowField.zeros((5, 5)))


@given(st.integers(0, 2**31 - 1))
def test_integer_flow_matches_gather(seed):
    r = np.random.default_rng(seed)
    img = r.random((7, 9))
    u = r.integers(-3, 4, size=(7, 9)).astype(float)
    v = r.integers(-3, 4, size=(7, 9)).astype(float)
    out, ok = warp_backward(img, FlowField(u, v))
    ys, xs = np.mgrid[0:7, 0:9]
    sx, sy = xs + u.astype(int), ys + v.astype(int)
    inside = (sx >= 0) & (sx < 9) & (sy >= 0) & (sy < 7)
    assert np.array_equal(ok, inside)
    assert np.allclose(out[inside], img[sy[inside], sx[inside]], atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_fractional_flow_matches_bilinear_oracle(seed):
    r = np.random.default_rng(seed)
    img = r.random((5, 6))
    u, v = r.uniform(-2, 2, (5, 6)), r.uniform(-2, 2, (5, 6))
    out, ok = warp_backward(img, FlowField(u, v))
    ref, inside = warp_oracle(img.tolist(), u.tolist(), v.tolist())
    assert np.allclose(out, np.array(ref), atol=1e-12)
    assert np.array_equal(ok, np.array(inside))


def test_warp_labels_nearest():
    lab = np.arange(12).reshape(3, 4)
    out, ok = warp_labels(lab, uniform((3, 4), 1.4))
    assert np.array_equal(out[:, :3], lab[:, 1:])
    assert not ok[:, 3].any()


# ---------------------------------------------------------------- visibility


def test_visibility_identical_frames():
    f = np.random.default_rng(0).random((4, 4, 3))
    assert np.all(visibility_mask(f, f).weights == 1.0)


def test_visibility_scalar_example():
    a = np.zeros((1, 1, 3))
    b = np.zeros((1, 1, 3))
    b[0, 0, 0] = 0.1  # squared discrepancy 0.01
    assert visibility_mask(a, b).weights[0, 0] == pytest.approx(0.60653, abs=1e-5)


def test_visibility_decreases_with_discrepancy():
    a = np.zeros((1, 5, 3))
    b = np.zeros((1, 5, 3))
    b[0, :, 1] = [0.0, 0.1, 0.3, 1.0, 10.0]
    w = visibility_mask(a, b).weights[0]
    assert np.all(np.diff(w) < 0) and w[-1] < 1e-100 and np.all(w > 0) | (w[-1] == 0)


# ---------------------------------------------------------------- consistency


def test_consistency_rigid_translation():
    ok = flow_consistency_mask(uniform((6, 8), 2.0), uniform((6, 8), -2.0))
    assert ok[:, :-2].all()


def test_consistency_zero_flows():
    assert flow_consistency_mask(FlowField.zeros((4, 4)), FlowField.zeros((4, 4))).all()


def test_consistency_scalar_example():
    # residual |5 - 2|^2 = 9 against 0.01 * (25 + 4) + 0.5 = 0.79
    ok = flow_consistency_mask(uniform((3, 12), 5.0), uniform((3, 12), -2.0))
    assert not ok.any()


@given(st.integers(-3, 3), st.integers(-2, 2))
def test_consistency_symmetric_for_translations(u, v):
    f, b = uniform((8, 10), u, v), uniform((8, 10), -u, -v)
    a = flow_consistency_mask(f, b)
    c = flow_consistency_mask(b, f)
    # same verdict wherever both targets stay inside the image
    assert a.sum() == c.sum()
    assert a[max(0, -v):8 - max(0, v), max(0, -u):10 - max(0, u)].all()


def test_consistency_detects_local_disagreement():
    f = uniform((5, 5), 1.0)
    b = uniform((5, 5), -1.0)
    b.u[2, 3] = 3.0
    ok = flow_consistency_mask(f, b)
    assert not ok[2, 2] and ok[0, 0]


# ---------------------------------------------------------------- relevance


def test_relevance_zero_motion():
    z = FlowField.zeros((4, 4))
    assert np.all(relevance_map(z, z).weights == 1.0)


def test_relevance_scalar_example():
    h, w = 3, 4  # diagonal 5
    f = uniform((h, w), 0.5)  # normalized magnitude 0.1 each way
    r = relevance_map(f, uniform((h, w), -0.5), alpha=10)
    assert np.allclose(r.weights, math.exp(-2.0))
    assert r.weights[0, 0] == pytest.approx(0.13534, abs=1e-5)


def test_relevance_alpha_zero():
    f = uniform((4, 4), 3.0, 1.0)
    assert np.all(relevance_map(f, f, alpha=0.0).weights == 1.0)


def test_relevance_raw_pixel_units():
    f = uniform((4, 4), 0.1)
    r = relevance_map(f, f, alpha=10, normalize=False)
    assert np.allclose(r.weights, math.exp(-2.0))


@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 20)), min_size=2, max_size=10, unique=True))
def test_relevance_monotone_in_motion(mags):
    mags = sorted(mags)
    u = np.array([mags])
    f = FlowField(u, np.zeros_like(u))
    w = relevance_map(f, FlowField.zeros(u.shape)).weights[0]
    assert np.all(np.diff(w) <= 0)
    assert np.all((w == 1.0) == (u[0] == 0))


def test_flow_magnitude_normalizes_by_diagonal():
    f = uniform((3, 4), 3.0, 4.0)
    assert np.allclose(flow_magnitude(f), 1.0)
    assert np.allclose(flow_magnitude(f, normalize=False), 5.0)


def test_compose_translations():
    a, b = uniform((6, 9), 1.0), uniform((6, 9), 2.0, 1.0)
    c = compose_flows([a, b])
    assert np.allclose(c.u[:4, :6], 3.0) and np.allclose(c.v[:4, :6], 1.0)

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from depthstab.core import DisparityMap, FlowField, Frame, VideoSequence
from depthstab.inference import (InferenceMode, Mode, VideoStabilizer, backward_pass,
                                 bidirectional_average, flow_guided_fusion, forward_pass,
                                 fuse_target, fusion_references, predict_initial, stabilize_video)
from depthstab.stabilizer import FlickerDepthPredictor


def static_seq(n=6, h=16, w=16, seed=0):
    r = np.random.default_rng(seed)
    frames = [Frame(r.random((h, w, 3)), k + 1) for k in range(n)]
    zero = [FlowField.zeros((h, w), k + 1, k + 2) for k in range(n - 1)]
    back = [FlowField.zeros((h, w), k + 2, k + 1) for k in range(n - 1)]
    gt = [DisparityMap(r.random((h, w)) + 0.2) for _ in range(n)]
    return VideoSequence(frames, gt, zero, back, name=f"static{seed}")


def depths(n=6, h=16, w=16, seed=1):
    r = np.random.default_rng(seed)
    return [DisparityMap(r.random((h, w)) * 2 + 1) for _ in range(n)]


# ---------------------------------------------------------------- modes


def test_mode_parsing_and_validation():
    assert Mode.parse("bidirectional") is Mode.BIDIRECTIONAL
    assert InferenceMode("flow").mode is Mode.FLOW_GUIDED
    with pytest.raises(ValueError):
        InferenceMode(beta=1.5)
    with pytest.raises(ValueError):
        InferenceMode(alpha=-1)


# ---------------------------------------------------------------- passes


def test_forward_pass_windows():
    pre = [[1, 1, 1], [1, 1, 1], [2, 1, 1], [3, 2, 1], [4, 3, 2]]
    assert VideoStabilizer.windows(_fake_stabilizer(5), "pre") == [[n] + r for n, r in enumerate(pre, 1)]
    assert VideoStabilizer.windows(_fake_stabilizer(10), "post")[1] == [2, 3, 4, 5]
    assert VideoStabilizer.windows(_fake_stabilizer(10), "post")[9] == [10, 10, 10, 10]


def _fake_stabilizer(n, n_ref=3, interval=1):
    obj = VideoStabilizer.__new__(VideoStabilizer)
    obj.n, obj.n_ref, obj.interval = n, n_ref, interval
    return obj


def test_interval_two_window():
    assert VideoStabilizer.windows(_fake_stabilizer(12, 3, 2), "pre")[4] == [5, 3, 1, 1]


def test_forward_pass_calls_each_window_once(tiny_model):
    seq = static_seq(6)
    vs = VideoStabilizer(tiny_model, seq, depths(6))
    out = vs.run("pre")
    assert len(out) == 6 and vs.window_calls == 6 and vs.encoder_calls == 6


def test_bidirectional_reuses_cached_features(tiny_model):
    seq = static_seq(6)
    res = stabilize_video(seq, None, tiny_model, "bi", initial=depths(6))
    assert res.timing["encoder_calls"] == 6
    assert res.timing["window_calls"] == 12


def test_reversed_forward_equals_backward(tiny_model):
    seq, d = static_seq(7), depths(7)
    rev_seq = VideoSequence([Frame(f.rgb, k + 1) for k, f in enumerate(reversed(seq.frames))])
    post = backward_pass(seq, d, tiny_model)
    pre_rev = forward_pass(rev_seq, d[::-1], tiny_model)
    for a, b in zip(post, reversed(pre_rev)):
        assert np.allclose(a.values, b.values, atol=1e-6)


def test_cached_pass_matches_direct_windows(tiny_model):
    from depthstab.stabilizer import stabilize_window
    seq, d = static_seq(6), depths(6)
    out = forward_pass(seq, d, tiny_model)
    rgb = np.stack([f.rgb for f in seq.frames])
    vals = np.stack([m.values for m in d])
    for n, win in enumerate(_fake_stabilizer(6).windows("pre"), start=1):
        idx = [k - 1 for k in win]
        ref = stabilize_window(tiny_model, rgb[idx], vals[idx])
        assert np.allclose(out[n - 1].values, ref, atol=2e-5)


def test_single_frame_modes_agree(tiny_model):
    seq = static_seq(1)
    d = depths(1)
    outs = [stabilize_video(seq, None, tiny_model, m, initial=d).depths[0].values
            for m in ("forward", "backward", "bi", "flow")]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


def test_outputs_stay_in_unit_range(tiny_model):
    seq = static_seq(6)
    for m in ("forward", "bi", "flow"):
        out = stabilize_video(seq, None, tiny_model, m, initial=depths(6)).depths
        v = np.stack([o.values for o in out])
        assert v.min() >= 0 and v.max() <= 1


def test_predictor_runs_once_per_frame(tiny_model):
    seq = static_seq(4)
    init = predict_initial(seq, FlickerDepthPredictor(seed=1))
    again = predict_initial(seq, FlickerDepthPredictor(seed=1))
    assert len(init) == 4
    assert all(np.array_equal(a.values, b.values, equal_nan=True) for a, b in zip(init, again))


# ---------------------------------------------------------------- bidirectional average


def test_bidirectional_examples():
    out = bidirectional_average([np.array([[0.2]])], [np.array([[0.4]])])
    assert out[0].values[0, 0] == pytest.approx(0.3)
    a = [np.random.default_rng(0).random((3, 3))]
    assert np.array_equal(bidirectional_average(a, a)[0].values, a[0])


@given(st.floats(0.0, 10.0))
def test_bidirectional_linearity(a):
    r = np.random.default_rng(0)
    pre, post = [r.random((3, 3))], [r.random((3, 3))]
    lhs = bidirectional_average([a * pre[0]], [a * post[0]])[0].values
    assert np.allclose(lhs, a * bidirectional_average(pre, post)[0].values)


def test_bidirectional_mismatch_raises():
    with pytest.raises(ValueError):
        bidirectional_average([np.zeros((2, 2))], [])
    with pytest.raises(ValueError):
        bidirectional_average([np.zeros((2, 2))], [np.zeros((3, 3))])


# ---------------------------------------------------------------- flow-guided fusion


def test_fusion_hand_example():
    out = fuse_target(np.array([[0.5]]), [np.array([[0.4]]), np.array([[0.8]])],
                      [np.array([[1.0]]), np.array([[math.exp(-2)]])], beta=0.5)
    second = (0.4 + math.exp(-2) * 0.8) / (1 + math.exp(-2))
    assert second == pytest.approx(0.44768, abs=1e-5)
    assert out[0, 0] == pytest.approx(0.47384, abs=1e-5)


def test_fusion_beta_one_is_bidirectional():
    bi = np.random.default_rng(0).random((4, 4))
    out = fuse_target(bi, [np.zeros((4, 4))], [np.ones((4, 4))], beta=1.0)
    assert np.array_equal(out, bi)


def test_fusion_vanishing_weights_fall_back():
    bi = np.random.default_rng(0).random((4, 4))
    out = fuse_target(bi, [np.ones((4, 4))], [np.zeros((4, 4))], beta=0.3)
    assert np.allclose(out, bi, atol=1e-15)


def test_fusion_no_references_returns_bi():
    bi = np.full((2, 2), 0.3)
    assert np.array_equal(fuse_target(bi, [], []), bi)


@given(st.integers(0, 10**6))
def test_fusion_is_convex(seed):
    r = np.random.default_rng(seed)
    bi = r.random((3, 3))
    refs = [r.random((3, 3)) for _ in range(4)]
    ws = [r.random((3, 3)) for _ in range(4)]
    out = fuse_target(bi, refs, ws, beta=float(r.random()))
    lo = np.minimum(bi, np.min(refs, 0))
    hi = np.maximum(bi, np.max(refs, 0))
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_fusion_references():
    assert fusion_references(1, 10) == [2, 3, 4]
    assert sorted(fusion_references(5, 10)) == [2, 3, 4, 6, 7, 8]
    assert fusion_references(1, 1) == []


def test_flow_fusion_static_equal_refs_is_identity():
    seq = static_seq(5)
    same = [np.full((16, 16), 0.4)] * 5
    out = flow_guided_fusion(seq, same, same)
    assert all(np.allclose(o.values, 0.4) for o in out)


def panning_seq(n=5, h=16, w=16):
    r = np.random.default_rng(3)
    frames = [Frame(r.random((h, w, 3)), k + 1) for k in range(n)]
    fwd = [FlowField(np.ones((h, w)), np.zeros((h, w)), k + 1, k + 2) for k in range(n - 1)]
    bwd = [FlowField(-np.ones((h, w)), np.zeros((h, w)), k + 2, k + 1) for k in range(n - 1)]
    return VideoSequence(frames, None, fwd, bwd)


def test_flow_fusion_huge_alpha_is_bidirectional():
    seq = panning_seq()
    r = np.random.default_rng(0)
    pre = [r.random((16, 16)) for _ in range(5)]
    post = [r.random((16, 16)) for _ in range(5)]
    out = flow_guided_fusion(seq, pre, post, None, InferenceMode("flow", alpha=1e9))
    for o, b in zip(out, bidirectional_average(pre, post)):
        assert np.array_equal(o.values, b.values)

"""Sliding-window inference: forward, backward, bidirectional and flow-guided fusion."""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .core import DisparityMap, Space, window_indices
from .flowops import relevance_map
from .stabilizer import (FlickerDepthPredictor, FrameFeatures, StabilizerModel, encode_frame,
                         renormalize, window_range)

FUSION_EPS = 1e-6


class Mode(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    BIDIRECTIONAL = "bi"
    FLOW_GUIDED = "flow"

    @classmethod
    def parse(cls, value):
        aliases = {"bidirectional": "bi", "flow_guided": "flow", "flow-guided": "flow"}
        return cls(aliases.get(value, value))


@dataclass
class InferenceMode:
    mode: Mode = Mode.FORWARD
    alpha: float = 10.0
    beta: float = 0.5
    normalize_flow: bool = True
    n_ref: int = 3
    interval: int = 1

    def __post_init__(self):
        self.mode = Mode.parse(self.mode) if isinstance(self.mode, str) else self.mode
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def video_id(seq) -> int:
    return zlib.crc32(seq.name.encode())


def predict_initial(seq, predictor) -> list:
    """Run the single-frame predictor once per frame (1-based frame numbers)."""
    if isinstance(predictor, FlickerDepthPredictor):
        vid = video_id(seq)
        return [predictor(seq.gt_disparity[k], vid, k) for k in range(len(seq))]
    return [predictor(seq, k + 1) for k in range(len(seq))]


class VideoStabilizer:
    """Encodes every frame once and assembles windows from the cached features.

    ``inputs`` are the per-frame fourth channels (DisparityMap or arrays).
    With ``fixed_range=(lo, span)`` every window uses that range instead of
    its own joint min/max, which is how label inputs are fed.
    """

    def __init__(self, model: StabilizerModel, seq, inputs, n_ref=None, interval: int = 1,
                 fixed_range=None):
        self.model = model
        self.n = len(seq)
        self.n_ref = n_ref or model.config.n_ref
        self.interval = interval
        self.fixed_range = fixed_range
        self.encoder_calls = 0
        self.window_calls = 0
        dtype = next(model.parameters()).dtype
        rgb = torch.from_numpy(np.stack([f.rgb.transpose(2, 0, 1) for f in seq.frames])).to(dtype)
        vals = [d.values if isinstance(d, DisparityMap) else np.asarray(d, float) for d in inputs]
        valid = [d.valid if isinstance(d, DisparityMap) else np.isfinite(v) for d, v in zip(inputs, vals)]
        self.valid = torch.from_numpy(np.stack(valid))
        self.depth = torch.from_numpy(np.stack([np.nan_to_num(v) for v in vals])).to(dtype)
        with torch.no_grad():
            self.feats = encode_frame(model, rgb, self.depth, self.valid)
        self.encoder_calls += self.n

    def windows(self, direction):
        return [[n] + window_indices(n, self.n, self.n_ref, self.interval, direction)
                for n in range(1, self.n + 1)]

    def run_tensor(self, direction, targets=None) -> torch.Tensor:
        """Raw model outputs for 1-based ``targets`` (all frames by default)."""
        wins = self.windows(direction)
        if targets is not None:
            wins = [wins[t - 1] for t in targets]
        idx = torch.tensor(wins) - 1  # (T, n_ref + 1)
        if self.fixed_range is None:
            lo, span, deg = window_range([self.depth[idx[:, j]] for j in range(idx.shape[1])],
                                         [self.valid[idx[:, j]] for j in range(idx.shape[1])])
        else:
            t = len(wins)
            lo = torch.full((t,), float(self.fixed_range[0]), dtype=self.depth.dtype)
            span = torch.full((t,), float(self.fixed_range[1]), dtype=self.depth.dtype)
            deg = torch.zeros(t, dtype=torch.bool)
        with torch.no_grad():
            per_pos = []
            for j in range(idx.shape[1]):
                sel = idx[:, j]
                f = FrameFeatures(*(tuple(x[sel] for x in part) for part in
                                    (self.feats.rgb, self.feats.depth, self.feats.ones)))
                per_pos.append(renormalize(f, lo, span, deg))
            refs = torch.stack([p[2] for p in per_pos[1:]], 1)
            out = self.model.forward_features(per_pos[0], refs)
        self.window_calls += len(wins)
        return out

    def run(self, direction, targets=None) -> list:
        out = self.run_tensor(direction, targets)
        return [DisparityMap(o.double().numpy(), space=Space.WINDOW_NORMALIZED) for o in out]


def forward_pass(seq, depths, model, n_ref=None, interval: int = 1) -> list:
    """D^pre: each frame stabilized against the previous ``n_ref`` frames."""
    return VideoStabilizer(model, seq, depths, n_ref, interval).run("pre")


def backward_pass(seq, depths, model, n_ref=None, interval: int = 1) -> list:
    """D^post: each frame stabilized against the following ``n_ref`` frames."""
    return VideoStabilizer(model, seq, depths, n_ref, interval).run("post")


def bidirectional_average(pre, post) -> list:
    if len(pre) != len(post):
        raise ValueError("pre and post sequences differ in length")
    out = []
    for a, b in zip(pre, post):
        a_v = a.values if isinstance(a, DisparityMap) else np.asarray(a, float)
        b_v = b.values if isinstance(b, DisparityMap) else np.asarray(b, float)
        if a_v.shape != b_v.shape:
            raise ValueError("shape mismatch")
        out.append(DisparityMap((a_v + b_v) / 2.0, space=Space.WINDOW_NORMALIZED))
    return out


def _values(x):
    return x.values if isinstance(x, DisparityMap) else np.asarray(x, float)


def fuse_target(bi_n, ref_bi, weights, beta: float = 0.5, eps: float = FUSION_EPS):
    """Fuse one target from its bidirectional map, reference maps and relevance weights.

    The reference term is a per-pixel convex combination of the references'
    bidirectional values; where the weights all but vanish it falls back to
    the target's own bidirectional value.
    """
    bi_n = np.asarray(bi_n, float)
    if not ref_bi:
        return bi_n.copy()
    w = np.stack(weights)
    r = np.stack(ref_bi)
    w = w.reshape(w.shape + (1,) * (r.ndim - w.ndim))  # broadcast over channels
    wsum = w.sum(0)
    ref_term = np.where(wsum < eps, bi_n, (w * r).sum(0) / (wsum + eps))
    return beta * bi_n + (1.0 - beta) * ref_term


def fusion_references(n: int, n_frames: int, span: int = 3) -> list:
    return [i for d in range(1, span + 1) for i in (n - d, n + d) if 1 <= i <= n_frames]


def flow_guided_fusion(seq, pre, post, bi=None, mode: InferenceMode | None = None) -> list:
    """D^flow for every frame; references within ``n_ref`` frames on both sides."""
    mode = mode or InferenceMode(Mode.FLOW_GUIDED)
    bi = bi or bidirectional_average(pre, post)
    n_frames = len(bi)
    out = []
    for n in range(1, n_frames + 1):
        refs = fusion_references(n, n_frames, mode.n_ref)
        ws, rs = [], []
        for i in refs:
            w = relevance_map(seq.flow(i, n), seq.flow(n, i), mode.alpha, mode.normalize_flow)
            ws.append(w.weights)
            rs.append((_values(pre[i - 1]) + _values(post[i - 1])) / 2.0)
        out.append(DisparityMap(fuse_target(_values(bi[n - 1]), rs, ws, mode.beta),
                                space=Space.WINDOW_NORMALIZED))
    return out


@dataclass
class InferenceResult:
    depths: list
    timing: dict
    pre: list = None
    post: list = None
    initial: list = None


def stabilize_video(seq, predictor, model: StabilizerModel, mode: InferenceMode | str = "forward",
                    initial=None) -> InferenceResult:
    """Predict, encode once per frame, stabilize in the requested mode; reports stage wall times.

    ``initial`` may carry precomputed predictor outputs, skipping the predictor.
    """
    if isinstance(mode, (str, Mode)):
        mode = InferenceMode(Mode.parse(mode) if isinstance(mode, str) else mode)
    timing = {}
    t0 = time.perf_counter()
    depths = initial if initial is not None else predict_initial(seq, predictor)
    timing["predictor_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    vs = VideoStabilizer(model, seq, depths, mode.n_ref, mode.interval)
    timing["encode_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    pre = post = None
    if mode.mode in (Mode.FORWARD, Mode.BIDIRECTIONAL, Mode.FLOW_GUIDED):
        pre = vs.run("pre")
    if mode.mode in (Mode.BACKWARD, Mode.BIDIRECTIONAL, Mode.FLOW_GUIDED):
        post = vs.run("post")
    timing["stabilize_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if mode.mode is Mode.FORWARD:
        out = pre
    elif mode.mode is Mode.BACKWARD:
        out = post
    elif mode.mode is Mode.BIDIRECTIONAL:
        out = bidirectional_average(pre, post)
    else:
        out = flow_guided_fusion(seq, pre, post, None, mode)
    timing["fusion_s"] = time.perf_counter() - t0
    timing["encoder_calls"] = vs.encoder_calls
    timing["window_calls"] = vs.window_calls
    return InferenceResult(out, timing, pre, post, depths)

"""Domain types and the per-map normalizations everything else builds on."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

QUANT_LEVELS = 65535


class AlignmentError(ValueError):
    """Raised when a map has zero spread and cannot be scale-shift aligned."""


class Space(str, Enum):
    RAW = "raw"
    WINDOW_NORMALIZED = "window-normalized"
    ALIGNED = "aligned"


class Direction(str, Enum):
    PRE = "pre"
    POST = "post"


@dataclass
class Frame:
    rgb: np.ndarray
    index: int = 1
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be HxWx3, got {self.rgb.shape}")

    @property
    def shape(self):
        return self.rgb.shape[:2]


@dataclass
class DisparityMap:
    values: np.ndarray
    valid: Optional[np.ndarray] = None
    space: Space = Space.RAW

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.values)
        else:
            self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.values)

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values, space=None) -> "DisparityMap":
        return DisparityMap(values, self.valid.copy(), self.space if space is None else space)


@dataclass
class FlowField:
    """Per-pixel displacement (u along x, v along y) from ``src_index`` to ``dst_index``."""

    u: np.ndarray
    v: np.ndarray
    src_index: int = 0
    dst_index: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must share a shape")

    @classmethod
    def from_array(cls, uv, src_index=0, dst_index=0) -> "FlowField":
        uv = np.asarray(uv)
        return cls(uv[..., 0], uv[..., 1], src_index, dst_index)

    @classmethod
    def zeros(cls, shape, src_index=0, dst_index=0) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape), src_index, dst_index)

    @property
    def shape(self):
        return self.u.shape

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


@dataclass
class VideoSequence:
    """Frames 1..N plus whatever ground truth is known.

    Lists are 0-based: ``gt_flow_fwd[k]`` maps frame k+1 to k+2 and
    ``gt_flow_bwd[k]`` maps frame k+2 back to k+1 (1-based frame numbers).
    ``pair_flows`` optionally holds exact flows between non-adjacent frames,
    keyed by 1-based ``(src, dst)``.
    """

    frames: list
    gt_disparity: Optional[list] = None
    gt_flow_fwd: Optional[list] = None
    gt_flow_bwd: Optional[list] = None
    gt_labels: Optional[list] = None
    fps: float = 24.0
    name: str = "video"
    pair_flows: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a sequence needs at least one frame")
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"frames disagree on shape: {shapes}")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape

    def flow(self, src: int, dst: int) -> FlowField:
        """Flow between 1-based frames ``src`` and ``dst``; composes adjacent flows if needed."""
        if src == dst:
            return FlowField.zeros(self.shape, src, dst)
        if (src, dst) in self.pair_flows:
            return self.pair_flows[(src, dst)]
        if dst == src + 1 and self.gt_flow_fwd is not None:
            return self.gt_flow_fwd[src - 1]
        if dst == src - 1 and self.gt_flow_bwd is not None:
            return self.gt_flow_bwd[dst - 1]
        from .flowops import compose_flows

        step = 1 if dst > src else -1
        chain = [self.flow(k, k + step) for k in range(src, dst, step)]
        return compose_flows(chain)


@dataclass
class SlidingWindow:
    target: int
    references: list
    interval: int = 1
    direction: Direction = Direction.PRE


def window_indices(n: int, n_frames: int, n_ref: int = 3, interval: int = 1,
                   direction: Direction | str = Direction.PRE) -> list:
    """1-based reference frame numbers for target ``n``, clamped to ``[1, n_frames]``."""
    direction = Direction(direction)
    sign = -1 if direction is Direction.PRE else 1
    return [min(max(n + sign * k * interval, 1), n_frames) for k in range(1, n_ref + 1)]


def make_window(n: int, n_frames: int, n_ref: int = 3, interval: int = 1,
                direction: Direction | str = Direction.PRE) -> SlidingWindow:
    direction = Direction(direction)
    return SlidingWindow(n, window_indices(n, n_frames, n_ref, interval, direction),
                         interval, direction)


def _values_and_masks(maps):
    values = [m.values if isinstance(m, DisparityMap) else np.asarray(m, dtype=np.float64)
              for m in maps]
    masks = [m.valid if isinstance(m, DisparityMap) else np.isfinite(v)
             for m, v in zip(maps, values)]
    return values, masks


def normalize_window(maps: Sequence) -> tuple[list, bool]:
    """Min-max normalize a window of disparity maps jointly.

    The min and max are taken over the valid pixels of every map in the
    window together, so relative scale between frames is preserved. Returns
    ``(normalized_maps, degenerate)``; a constant window yields all-zero maps
    with ``degenerate=True``.
    """
    if len(maps) == 0:
        raise ValueError("empty window")
    values, masks = _values_and_masks(maps)
    if len({v.shape for v in values}) != 1:
        raise ValueError("window maps must share a shape")
    pooled = np.concatenate([v[m] for v, m in zip(values, masks)])
    if pooled.size == 0:
        raise ValueError("window has no valid pixels")
    lo, hi = pooled.min(), pooled.max()
    out = []
    if hi <= lo:
        for v, m in zip(values, masks):
            out.append(DisparityMap(np.zeros_like(v), m, Space.WINDOW_NORMALIZED))
        return out, True
    for v, m in zip(values, masks):
        norm = np.where(m, (v - lo) / (hi - lo), 0.0)
        out.append(DisparityMap(norm, m, Space.WINDOW_NORMALIZED))
    return out, False


def masked_median(values: np.ndarray, valid: np.ndarray) -> float:
    sel = values[valid]
    if sel.size == 0:
        raise AlignmentError("no valid pixels")
    return float(np.median(sel))


def scale_shift(values: np.ndarray, valid: np.ndarray) -> tuple[float, float]:
    """Median translation and mean absolute deviation scale over valid pixels."""
    t = masked_median(values, valid)
    s = float(np.mean(np.abs(values[valid] - t)))
    return t, s


@dataclass
class Alignment:
    t_pred: float
    s_pred: float
    t_gt: float
    s_gt: float
    pred_aligned: DisparityMap
    gt_aligned: DisparityMap


def align_scale_shift(pred, gt) -> Alignment:
    """Bring ``pred`` and ``gt`` to zero median and unit mean absolute deviation.

    Both maps are aligned over their joint valid mask.
    """
    pred = pred if isinstance(pred, DisparityMap) else DisparityMap(pred)
    gt = gt if isinstance(gt, DisparityMap) else DisparityMap(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must share a shape")
    valid = pred.valid & gt.valid
    if not valid.any():
        raise AlignmentError("joint valid mask is empty")
    t_p, s_p = scale_shift(pred.values, valid)
    t_g, s_g = scale_shift(gt.values, valid)
    if s_p <= 0 or s_g <= 0:
        raise AlignmentError("constant map cannot be aligned")
    pa = np.where(valid, (pred.values - t_p) / s_p, 0.0)
    ga = np.where(valid, (gt.values - t_g) / s_g, 0.0)
    return Alignment(t_p, s_p, t_g, s_g,
                     DisparityMap(pa, valid, Space.ALIGNED),
                     DisparityMap(ga, valid, Space.ALIGNED))


def align_to_reference(pred, gt) -> DisparityMap:
    """Map ``pred`` into ``gt``'s value range using the median/MAD alignment."""
    a = align_scale_shift(pred, gt)
    values = a.pred_aligned.values * a.s_gt + a.t_gt
    return DisparityMap(values, a.pred_aligned.valid, Space.RAW)


def discretize_disparity(d) -> np.ndarray:
    """Quantize window-normalized disparity in [0, 1] to 16-bit levels, rounding half up."""
    values = d.values if isinstance(d, DisparityMap) else np.asarray(d, dtype=np.float64)
    valid = d.valid if isinstance(d, DisparityMap) else np.isfinite(values)
    sel = values[valid]
    if sel.size and (sel.min() < 0.0 or sel.max() > 1.0):
        raise ValueError("discretize_disparity expects values in [0, 1]")
    q = np.floor(np.where(valid, values, 0.0) * QUANT_LEVELS + 0.5)
    return q.astype(np.uint16 if values.ndim else np.int64)


def dequantize_disparity(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / QUANT_LEVELS

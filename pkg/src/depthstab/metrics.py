"""Accuracy and temporal-consistency metrics: delta thresholds, Rel, OPW, TC and mIoU."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import AlignmentError, DisparityMap, align_to_reference, scale_shift
from .flowops import warp_labels
from .losses import temporal_loss

log = logging.getLogger(__name__)

GT_FLOOR = 1e-6
THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)


def _dmap(x):
    return x if isinstance(x, DisparityMap) else DisparityMap(x)


def depth_metrics(pred, gt, valid=None, align: bool = True):
    """``(delta1, delta2, delta3, rel)`` over the joint valid pixels.

    With ``align`` the prediction is first mapped into the ground truth's
    range by median / mean-absolute-deviation alignment. Both maps are
    floored at 1e-6, so ground truth scored against itself is exact even
    where the alignment round trip leaves a sub-ulp negative value.
    """
    pred, gt = _dmap(pred), _dmap(gt)
    mask = pred.valid & gt.valid
    if valid is not None:
        mask &= np.asarray(valid, bool)
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    p = pred.values
    if align:
        p = align_to_reference(DisparityMap(p, mask), DisparityMap(gt.values, mask)).values
    p = np.maximum(p[mask], GT_FLOOR)
    g = np.maximum(gt.values[mask], GT_FLOOR)
    ratio = np.maximum(p / g, g / p)
    deltas = tuple(float(np.mean(ratio < t)) for t in THRESHOLDS)
    rel = float(np.mean(np.abs(p - g) / g))
    return deltas + (rel,)


def _t(a, dtype=torch.float64):
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def opw_pair(d_n, d_prev, flow_n_to_prev, frame_n, frame_prev, gamma: float = 50.0) -> float:
    """One consecutive-pair term; exactly the training temporal loss, in float64."""
    d_n, d_prev = _dmap(d_n), _dmap(d_prev)
    uv = flow_n_to_prev.as_array() if hasattr(flow_n_to_prev, "as_array") else np.asarray(flow_n_to_prev)
    rgb_n = frame_n.rgb if hasattr(frame_n, "rgb") else np.asarray(frame_n)
    rgb_p = frame_prev.rgb if hasattr(frame_prev, "rgb") else np.asarray(frame_prev)
    with torch.no_grad():
        val = temporal_loss(_t(np.where(d_n.valid, d_n.values, 0.0)),
                            _t(np.where(d_prev.valid, d_prev.values, 0.0)),
                            _t(uv.transpose(2, 0, 1)), _t(rgb_n.transpose(2, 0, 1)),
                            _t(rgb_p.transpose(2, 0, 1)), gamma,
                            torch.from_numpy(d_n.valid), torch.from_numpy(d_prev.valid))
    return float(val)


def opw_curve(depths, flows_bwd, frames, gamma: float = 50.0) -> list:
    """Per-pair terms for n = 2..N; ``flows_bwd[k]`` maps frame k+2 to k+1 (1-based)."""
    if len(depths) < 2:
        raise ValueError("OPW needs at least two frames")
    return [opw_pair(depths[k], depths[k - 1], flows_bwd[k - 1], frames[k], frames[k - 1], gamma)
            for k in range(1, len(depths))]


def opw(depths, flows_bwd, frames, gamma: float = 50.0) -> float:
    return float(np.mean(opw_curve(depths, flows_bwd, frames, gamma)))


def align_video(preds, gts, valids=None) -> list:
    """Map a whole prediction sequence into ground-truth range with one scale and shift."""
    preds = [_dmap(p) for p in preds]
    gts = [_dmap(g) for g in gts]
    masks = [p.valid & g.valid & (True if valids is None else np.asarray(v, bool))
             for p, g, v in zip(preds, gts, valids or [None] * len(preds))]
    pv = np.concatenate([p.values[m] for p, m in zip(preds, masks)])
    gv = np.concatenate([g.values[m] for g, m in zip(gts, masks)])
    t_p, s_p = scale_shift(pv, np.ones_like(pv, bool))
    t_g, s_g = scale_shift(gv, np.ones_like(gv, bool))
    if s_p <= 0 or s_g <= 0:
        raise AlignmentError("constant sequence cannot be aligned")
    return [DisparityMap((p.values - t_p) / s_p * s_g + t_g, p.valid) for p in preds]


def miou(pred, gt, num_classes: Optional[int] = None, valid=None) -> float:
    """Mean IoU over the classes present in either map."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    mask = np.ones(pred.shape, bool) if valid is None else np.asarray(valid, bool)
    p, g = pred[mask], gt[mask]
    classes = np.union1d(np.unique(p), np.unique(g))
    if num_classes is not None:
        classes = classes[classes < num_classes]
    if classes.size == 0:
        return 1.0
    ious = [np.sum((p == c) & (g == c)) / np.sum((p == c) | (g == c)) for c in classes]
    return float(np.mean(ious))


def tc_pair(q_n, q_prev, flow_n_to_prev) -> float:
    warped, ok = warp_labels(np.asarray(q_prev), flow_n_to_prev)
    return miou(q_n, warped, valid=ok)


def temporal_consistency_tc(labels, flows_bwd) -> float:
    """Mean over consecutive pairs of the IoU between Q_n and the flow-warped Q_{n-1}."""
    if len(labels) < 2:
        raise ValueError("TC needs at least two frames")
    return float(np.mean([tc_pair(labels[k], labels[k - 1], flows_bwd[k - 1])
                          for k in range(1, len(labels))]))


@dataclass
class MetricsReport:
    delta1: float = float("nan")
    delta2: float = float("nan")
    delta3: float = float("nan")
    rel: float = float("nan")
    opw: float = float("nan")
    miou: Optional[float] = None
    tc: Optional[float] = None
    per_video: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isnan(self.delta1) and not self.delta1 <= self.delta2 <= self.delta3:
            raise ValueError("delta thresholds must be monotone")

    def overall(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "per_video" and v is not None}
        return {k: v for k, v in d.items() if not (isinstance(v, float) and np.isnan(v))}

    def to_json(self, config=None, timestamp=None) -> str:
        cfg = json.dumps(config or {}, sort_keys=True, default=str)
        doc = {"overall": self.overall(), "per_video": self.per_video,
               "config_hash": hashlib.sha256(cfg.encode()).hexdigest()[:16],
               "timestamp": timestamp}
        return json.dumps(doc, indent=2, sort_keys=True)


def evaluate_video(seq, preds=None, align: bool = True, per_frame_align: bool = True,
                   exclude_sky: bool = True, sky_class: int = 1, labels=None) -> dict:
    """Metrics of one predicted depth sequence (list of DisparityMap) against ``seq``.

    OPW is measured after mapping the predictions into ground-truth range
    with a single per-video scale and shift, which keeps frame-to-frame
    flicker intact while making different output ranges comparable.
    """
    out = {}
    if preds is None:
        pass
    elif seq.gt_disparity is None:
        warnings.warn(f"{seq.name}: no ground-truth disparity; depth metrics omitted")
    else:
        sky = None
        if exclude_sky and seq.gt_labels is not None:
            sky = [np.asarray(lab) == sky_class for lab in seq.gt_labels]
        vals = []
        video_aligned = align_video(preds, seq.gt_disparity) if align and not per_frame_align else None
        for k, (p, g) in enumerate(zip(preds, seq.gt_disparity)):
            m = None if sky is None else ~sky[k]
            if video_aligned is not None:
                vals.append(depth_metrics(video_aligned[k], g, m, align=False))
            else:
                vals.append(depth_metrics(p, g, m, align=align))
        d1, d2, d3, rel = np.mean(np.asarray(vals), axis=0)
        out.update(delta1=float(d1), delta2=float(d2), delta3=float(d3), rel=float(rel))
        if len(preds) > 1 and seq.gt_flow_bwd is not None:
            aligned = align_video(preds, seq.gt_disparity) if align else preds
            out["opw"] = opw(aligned, seq.gt_flow_bwd, seq.frames)
    if labels is not None:
        if seq.gt_labels is not None:
            out["miou"] = float(np.mean([miou(p, g) for p, g in zip(labels, seq.gt_labels)]))
        if len(labels) > 1 and seq.gt_flow_bwd is not None:
            out["tc"] = temporal_consistency_tc(labels, seq.gt_flow_bwd)
    return out


def evaluate(sequences, predictions=None, label_predictions=None, **kw) -> MetricsReport:
    """Per-video metrics and their video means."""
    per = {}
    for i, seq in enumerate(sequences):
        preds = None if predictions is None else predictions[i]
        labels = None if label_predictions is None else label_predictions[i]
        per[seq.name] = evaluate_video(seq, preds, labels=labels, **kw)
    keys = sorted({k for v in per.values() for k in v})
    overall = {k: float(np.mean([v[k] for v in per.values() if k in v])) for k in keys}
    return MetricsReport(per_video=per, **overall)

"""Flow-driven warping, visibility weights, consistency checks and relevance maps.

The torch functions (``warp_tensor``, ``visibility_tensor``) are the shared
kernels; the numpy-facing wrappers convert to float64 tensors and back so that
training losses and evaluation metrics run the exact same arithmetic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import DisparityMap, FlowField, Frame

# UnFlow-style adaptive threshold constants
CONSISTENCY_A1 = 0.01
CONSISTENCY_A2 = 0.5


def _base_grid(h, w, dtype, device):
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                            torch.arange(w, dtype=dtype, device=device), indexing="ij")
    return xs, ys


def warp_tensor(x: torch.Tensor, flow: torch.Tensor):
    """Backward-warp ``x`` (B,C,H,W) by ``flow`` (B,2,H,W).

    ``out[p] = x[p + flow[p]]`` with bilinear sampling. Samples that land
    outside the image read the clamped border value and are reported invalid.
    Integer sample positions reproduce the input exactly.
    Returns ``(warped, valid)`` with ``valid`` a (B,1,H,W) bool tensor.
    """
    b, c, h, w = x.shape
    xs, ys = _base_grid(h, w, flow.dtype, flow.device)
    sx = xs + flow[:, 0]
    sy = ys + flow[:, 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = sx.clamp(0, w - 1).to(x.dtype)
    sy = sy.clamp(0, h - 1).to(x.dtype)
    x0 = sx.detach().floor()
    y0 = sy.detach().floor()
    fx, fy = sx - x0, sy - y0
    x0, y0 = x0.long(), y0.long()
    x1, y1 = (x0 + 1).clamp_max(w - 1), (y0 + 1).clamp_max(h - 1)
    flat = x.flatten(2)

    def gather(yy, xx):
        idx = (yy * w + xx).flatten(1).unsqueeze(1).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    fx, fy = fx.unsqueeze(1), fy.unsqueeze(1)
    out = ((1 - fx) * (1 - fy) * gather(y0, x0) + fx * (1 - fy) * gather(y0, x1)
           + (1 - fx) * fy * gather(y1, x0) + fx * fy * gather(y1, x1))
    return out, valid.unsqueeze(1)


def visibility_tensor(frame_n: torch.Tensor, warped_prev: torch.Tensor, gamma: float = 50.0):
    """``exp(-gamma * ||frame_n - warped_prev||^2)`` over the channel axis (dim 1)."""
    return torch.exp(-gamma * ((frame_n - warped_prev) ** 2).sum(dim=1, keepdim=True))


def _to_tensor_image(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return torch.from_numpy(a)[None, None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]


def _to_tensor_flow(flow):
    uv = flow.as_array() if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    return torch.from_numpy(np.ascontiguousarray(uv.transpose(2, 0, 1))).double()[None]


def warp_backward(image, flow, valid=None):
    """Backward-warp a disparity map, frame, or raw array by ``flow``.

    Returns an object of the same kind. For raw arrays a ``(warped, valid)``
    tuple is returned. Validity of the source map is carried through by
    sampling its mask and requiring full weight.
    """
    if isinstance(image, DisparityMap):
        src_valid = image.valid
        values = np.where(src_valid, image.values, 0.0)
        warped, ok = warp_backward(values, flow)
        if not src_valid.all():
            wmask, _ = warp_backward(src_valid.astype(np.float64), flow)
            ok &= wmask > 1.0 - 1e-9
        return DisparityMap(warped, ok, image.space)
    if isinstance(image, Frame):
        warped, ok = warp_backward(image.rgb, flow)
        return Frame(warped, image.index, ok)
    arr = np.asarray(image, dtype=np.float64)
    fl = _to_tensor_flow(flow)
    if fl.shape[-2:] != arr.shape[:2]:
        raise ValueError(f"flow shape {tuple(fl.shape[-2:])} does not match image {arr.shape[:2]}")
    with torch.no_grad():
        out, ok = warp_tensor(_to_tensor_image(arr), fl)
    out = out[0].numpy()
    out = out[0] if arr.ndim == 2 else out.transpose(1, 2, 0)
    ok = ok[0, 0].numpy()
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    return out, ok


def warp_labels(labels: np.ndarray, flow) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour backward warp of an integer label map."""
    uv = flow.as_array() if isinstance(flow, FlowField) else np.asarray(flow)
    h, w = labels.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = np.floor(xs + uv[..., 0] + 0.5).astype(np.int64)
    sy = np.floor(ys + uv[..., 1] + 0.5).astype(np.int64)
    ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = labels[np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)]
    return out, ok


@dataclass
class VisibilityMask:
    weights: np.ndarray


def visibility_mask(frame_n, warped_prev, gamma: float = 50.0) -> VisibilityMask:
    a = frame_n.rgb if isinstance(frame_n, Frame) else np.asarray(frame_n, dtype=np.float64)
    b = warped_prev.rgb if isinstance(warped_prev, Frame) else np.asarray(warped_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("frames must share a shape")
    with torch.no_grad():
        o = visibility_tensor(_to_tensor_image(a), _to_tensor_image(b), gamma)
    return VisibilityMask(o[0, 0].numpy())


def compose_flows(chain) -> FlowField:
    """Chain flows ``a->b, b->c, ...`` into ``a->z`` by backward-warping each step."""
    total = chain[0].as_array().copy()
    for nxt in chain[1:]:
        step, _ = warp_backward(nxt.as_array(), total)
        total = total + step
    return FlowField.from_array(total, chain[0].src_index, chain[-1].dst_index)


def flow_consistency_mask(flow_fwd, flow_bwd, a1: float = CONSISTENCY_A1,
                          a2: float = CONSISTENCY_A2) -> np.ndarray:
    """Forward-backward check with the adaptive per-pixel threshold.

    A pixel passes when ``|f + b(p+f)|^2 < a1 (|f|^2 + |b(p+f)|^2) + a2``.
    Pixels whose forward target leaves the image fail.
    """
    f = flow_fwd.as_array() if isinstance(flow_fwd, FlowField) else np.asarray(flow_fwd, float)
    b_at, inside = warp_backward(
        flow_bwd.as_array() if isinstance(flow_bwd, FlowField) else np.asarray(flow_bwd, float), f)
    resid = ((f + b_at) ** 2).sum(-1)
    bound = a1 * ((f ** 2).sum(-1) + (b_at ** 2).sum(-1)) + a2
    return (resid < bound) & inside


@dataclass
class RelevanceMap:
    weights: np.ndarray
    ref_index: int = 0


def flow_magnitude(flow, normalize: bool = True) -> np.ndarray:
    uv = flow.as_array() if isinstance(flow, FlowField) else np.asarray(flow, float)
    mag = np.sqrt((uv ** 2).sum(-1))
    if normalize:
        h, w = mag.shape
        mag = mag / math.hypot(h, w)
    return mag


def relevance_map(flow_i_to_n, flow_n_to_i, alpha: float = 10.0,
                  normalize: bool = True) -> RelevanceMap:
    """Per-pixel relevance ``exp(-alpha * (|FL_i->n| + |FL_n->i|))``.

    Magnitudes are divided by the image diagonal when ``normalize`` is set.
    """
    total = flow_magnitude(flow_i_to_n, normalize) + flow_magnitude(flow_n_to_i, normalize)
    ref = flow_i_to_n.src_index if isinstance(flow_i_to_n, FlowField) else 0
    return RelevanceMap(np.exp(-alpha * total), ref)

"""Training objective: affinity-invariant, multi-scale gradient matching and flow-warped temporal terms.

All functions take torch tensors. Disparity maps are (H, W) or (B, H, W);
frames are (3, H, W) or (B, 3, H, W); flows are (2, H, W) or (B, 2, H, W)
in pixel units with channel 0 the x displacement.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import AlignmentError
from .flowops import visibility_tensor, warp_tensor


@dataclass
class LossWeights:
    lambda_temporal: float = 0.2
    mu_gradient: float = 0.5
    K_scales: int = 4
    gamma_visibility: float = 50.0

    def __post_init__(self):
        if min(self.lambda_temporal, self.mu_gradient, self.gamma_visibility) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.K_scales < 1:
            raise ValueError("K_scales must be >= 1")


def _batched(x, dims):
    """Add a batch axis when ``x`` has ``dims`` axes."""
    return (x.unsqueeze(0), True) if x.dim() == dims else (x, False)


def _mask_like(x, valid):
    if valid is None:
        return torch.isfinite(x)
    return valid.to(torch.bool) & torch.isfinite(x)


def align_tensor(d: torch.Tensor, valid: torch.Tensor):
    """Median / mean-absolute-deviation alignment of a single (H, W) map.

    The even-count median is the mean of the two central values; gradients
    pass through the order statistics, so ties get an arbitrary subgradient.
    """
    sel = d[valid]
    if sel.numel() == 0:
        raise AlignmentError("no valid pixels")
    t = torch.quantile(sel, 0.5)
    s = (sel - t).abs().mean()
    if not s > 0:
        raise AlignmentError("constant map cannot be aligned")
    return torch.where(valid, (d - t) / s, torch.zeros_like(d))


def _aligned_pair(pred, gt, valid):
    pred, squeeze = _batched(pred, 2)
    gt, _ = _batched(gt, 2)
    valid = _mask_like(pred, None if valid is None else _batched(valid, 2)[0]) & torch.isfinite(gt)
    pa = torch.stack([align_tensor(p, m) for p, m in zip(pred, valid)])
    ga = torch.stack([align_tensor(g, m) for g, m in zip(gt, valid)])
    return pa, ga, valid


def affinity_invariant_loss(pred, gt, valid=None):
    """Mean absolute difference of the scale-shift aligned maps over valid pixels."""
    pa, ga, valid = _aligned_pair(pred, gt, valid)
    per = [((a - g).abs()[m]).mean() for a, g, m in zip(pa, ga, valid)]
    return torch.stack(per).mean()


def gradient_matching_residual(residual, valid, K: int = 4):
    """Multi-scale gradient penalty of an already aligned residual (B, H, W)."""
    r = torch.where(valid, residual, torch.zeros_like(residual)).unsqueeze(1)
    m = valid.to(residual.dtype).unsqueeze(1)
    total = residual.new_zeros(residual.shape[0])
    for k in range(K):
        if k > 0:
            if min(r.shape[-2:]) < 4:
                raise ValueError(f"{K} scales do not fit a {tuple(residual.shape[-2:])} map")
            r = F.avg_pool2d(r, 2)
            # a coarse pixel is valid only when all four children were
            m = (F.avg_pool2d(m, 2) > 1.0 - 1e-9).to(r.dtype)
        gx = (r[..., :, 1:] - r[..., :, :-1]).abs() * m[..., :, 1:] * m[..., :, :-1]
        gy = (r[..., 1:, :] - r[..., :-1, :]).abs() * m[..., 1:, :] * m[..., :-1, :]
        count = m.sum(dim=(1, 2, 3)).clamp_min(1.0)
        total = total + (gx.sum(dim=(1, 2, 3)) + gy.sum(dim=(1, 2, 3))) / count
    return total


def gradient_matching_loss(pred, gt, valid=None, K: int = 4):
    pa, ga, valid = _aligned_pair(pred, gt, valid)
    return gradient_matching_residual(pa - ga, valid, K).mean()


def spatial_loss(pred, gt, valid=None, weights: LossWeights | None = None):
    """``L_af + mu * L_grad``, returned with its two parts."""
    w = weights or LossWeights()
    pa, ga, valid = _aligned_pair(pred, gt, valid)
    l_af = torch.stack([((a - g).abs()[m]).mean() for a, g, m in zip(pa, ga, valid)]).mean()
    l_grad = gradient_matching_residual(pa - ga, valid, w.K_scales).mean()
    return l_af + w.mu_gradient * l_grad, l_af, l_grad


def temporal_loss(d_n, d_prev, flow, frame_n, frame_prev, gamma: float = 50.0,
                  valid_n=None, valid_prev=None):
    """Visibility-weighted mean |D_n - warp(D_prev)|.

    ``flow`` maps frame n to frame n-1 so that backward warping pulls
    ``d_prev`` into frame n's pixel grid. Pixels whose sample leaves the
    image, or whose source is invalid, are left out of the mean.
    """
    d_n, squeeze = _batched(d_n, 2)
    d_prev, _ = _batched(d_prev, 2)
    flow, _ = _batched(flow, 3)
    frame_n, _ = _batched(frame_n, 3)
    frame_prev, _ = _batched(frame_prev, 3)
    dtype = d_n.dtype
    warped, inside = warp_tensor(d_prev.unsqueeze(1), flow.to(dtype))
    warped_rgb, _ = warp_tensor(frame_prev.to(dtype), flow.to(dtype))
    vis = visibility_tensor(frame_n.to(dtype), warped_rgb, gamma)[:, 0]
    mask = inside[:, 0] & torch.isfinite(d_n)
    if valid_n is not None:
        mask = mask & _batched(valid_n, 2)[0].to(torch.bool)
    if valid_prev is not None:
        src = _batched(valid_prev, 2)[0].to(dtype).unsqueeze(1)
        wmask, _ = warp_tensor(src, flow.to(dtype))
        mask = mask & (wmask[:, 0] > 1.0 - 1e-4)
    counts = mask.sum(dim=(1, 2))
    if (counts == 0).any():
        raise ValueError("temporal loss has an empty joint mask")
    diff = torch.where(mask, vis * (d_n - warped[:, 0]).abs(), torch.zeros_like(d_n))
    per = diff.sum(dim=(1, 2)) / counts.to(dtype)
    return per.mean()


def window_loss(preds, gts, flows_bwd, frames, weights: LossWeights | None = None, valid=None):
    """Clip objective summed over consecutive pairs n = 2..N.

    ``preds``/``gts`` are (N, H, W) or (B, N, H, W); ``flows_bwd[k]`` maps
    clip frame k+1 to k; ``frames`` is (N, 3, H, W) or (B, N, 3, H, W).
    Interior frames' spatial terms are counted twice, exactly as the pairwise
    sum is written. Returns ``(total, breakdown)``.
    """
    w = weights or LossWeights()
    preds, _ = _batched(preds, 3)
    gts, _ = _batched(gts, 3)
    frames, _ = _batched(frames, 4)
    flows_bwd, _ = _batched(flows_bwd, 4)
    if valid is not None:
        valid, _ = _batched(valid, 3)
    n = preds.shape[1]
    if n < 2:
        raise ValueError("window_loss needs at least two frames")
    spatial = []
    for k in range(n):
        v = None if valid is None else valid[:, k]
        spatial.append(spatial_loss(preds[:, k], gts[:, k], v, w))
    total = preds.new_zeros(())
    l_af = l_grad = l_t = preds.new_zeros(())
    for k in range(1, n):
        vt = temporal_loss(preds[:, k], preds[:, k - 1], flows_bwd[:, k - 1], frames[:, k],
                           frames[:, k - 1], w.gamma_visibility,
                           None if valid is None else valid[:, k],
                           None if valid is None else valid[:, k - 1])
        total = total + spatial[k - 1][0] + spatial[k][0] + w.lambda_temporal * vt
        l_af = l_af + spatial[k - 1][1] + spatial[k][1]
        l_grad = l_grad + spatial[k - 1][2] + spatial[k][2]
        l_t = l_t + vt
    breakdown = {k: float(v.detach()) for k, v in
                 (("L_af", l_af), ("L_grad", l_grad), ("L_t", l_t), ("total", total))}
    return total, breakdown


def combine_terms(spatial_terms, temporal_terms, lambda_temporal: float = 0.2):
    """Pairwise clip objective from precomputed per-frame spatial and per-pair temporal values."""
    total = 0.0
    for k in range(1, len(spatial_terms)):
        total = total + spatial_terms[k - 1] + spatial_terms[k] + lambda_temporal * temporal_terms[k - 1]
    return total

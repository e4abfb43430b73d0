"""Stabilization network and the stand-in single-image predictors it plugs into."""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DisparityMap

CHECKPOINT_FORMAT = 1


@dataclass
class StabilizerConfig:
    embed_dim: int = 64
    patch: int = 7
    n_ref: int = 3
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64])
    out_channels: int = 1
    heads: int = 1
    mlp_ratio: int = 2
    pool_extent: int = 1  # reference pooling window in patches (1 = the aligned patch)
    seed: int = 0

    def __post_init__(self):
        if self.patch < 1 or self.n_ref < 1 or self.out_channels < 1:
            raise ValueError("patch, n_ref and out_channels must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must divide evenly into heads")
        if self.pool_extent < 1 or self.pool_extent % 2 == 0:
            raise ValueError("pool_extent must be an odd positive integer")
        self.encoder_channels = list(self.encoder_channels)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StabilizerConfig":
        return cls(**json.loads(text))


# ---------------------------------------------------------------- predictors


@dataclass
class FlickerParams:
    scale_range: tuple = (0.8, 1.2)
    shift_range: tuple = (-0.1, 0.1)
    noise_sigma: float = 0.02


def flicker_predictor(gt, params: FlickerParams | None = None, frame_seed: int = 0) -> DisparityMap:
    """Corrupt ground truth like an accurate but temporally unstable single-frame model.

    Each call draws one scale and shift for the whole frame plus i.i.d.
    Gaussian pixel noise, all from ``frame_seed``.
    """
    p = params or FlickerParams()
    gt = gt if isinstance(gt, DisparityMap) else DisparityMap(gt)
    rng = np.random.default_rng(frame_seed)
    a = rng.uniform(*p.scale_range) if p.scale_range[0] != p.scale_range[1] else p.scale_range[0]
    b = rng.uniform(*p.shift_range) if p.shift_range[0] != p.shift_range[1] else p.shift_range[0]
    noise = rng.standard_normal(gt.shape) * p.noise_sigma if p.noise_sigma > 0 else 0.0
    base = np.where(gt.valid, gt.values, 0.0)
    out = a * base + b + noise
    return DisparityMap(np.where(gt.valid, out, np.nan), gt.valid.copy())


def frame_seed(base_seed: int, video: int, frame: int) -> int:
    return int(np.random.SeedSequence([base_seed, video, frame]).generate_state(1)[0])


class FlickerDepthPredictor:
    """Callable predictor ``(frame_index, gt) -> DisparityMap`` seeded per video and frame."""

    def __init__(self, params: FlickerParams | None = None, seed: int = 0):
        self.params = params or FlickerParams()
        self.seed = seed

    def __call__(self, gt, video: int, frame: int) -> DisparityMap:
        return flicker_predictor(gt, self.params, frame_seed(self.seed, video, frame))


# ---------------------------------------------------------------- network


def normalize_window_tensor(depth: torch.Tensor, valid: Optional[torch.Tensor] = None):
    """Joint min-max normalization over dims (1, 2, 3) of (B, n, H, W); constant windows map to 0."""
    if valid is None:
        valid = torch.isfinite(depth)
    big = torch.finfo(depth.dtype).max
    lo = torch.where(valid, depth, torch.full_like(depth, big)).amin(dim=(1, 2, 3), keepdim=True)
    hi = torch.where(valid, depth, torch.full_like(depth, -big)).amax(dim=(1, 2, 3), keepdim=True)
    span = hi - lo
    degenerate = span <= 0
    out = (depth - lo) / torch.where(degenerate, torch.ones_like(span), span)
    out = torch.where(valid & ~degenerate, out, torch.zeros_like(out))
    return out


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class Encoder(nn.Module):
    """Three strided conv stages over RGB, plus a bias-free linear path over depth.

    The depth path never passes through a nonlinearity, so the features of a
    window-normalized map ``(d - lo) / span`` equal
    ``(E(d) - lo * E(1)) / span``. That lets per-frame features be cached and
    re-normalized for every window a frame takes part in.
    """

    def __init__(self, channels, embed_dim):
        super().__init__()
        c1, c2, c3 = channels
        self.stage1 = nn.Sequential(_conv(3, c1), nn.ReLU(), _conv(c1, c1), nn.ReLU())
        self.stage2 = nn.Sequential(_conv(c1, c2, stride=2), nn.ReLU())
        self.stage3 = nn.Sequential(_conv(c2, c3, stride=2), nn.ReLU())
        self.proj = nn.Conv2d(c3, embed_dim, 1)
        self.depth1 = nn.Conv2d(1, c1, 3, padding=1, bias=False)
        self.depth2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1, bias=False)
        self.depth3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1, bias=False)
        self.depth_proj = nn.Conv2d(c3, embed_dim, 1, bias=False)

    def rgb_features(self, rgb):
        f1 = self.stage1(rgb)
        f2 = self.stage2(f1)
        return f1, f2, self.proj(self.stage3(f2))

    def depth_features(self, depth):
        """Linear features of a (B, H, W) depth map."""
        d1 = self.depth1(depth.unsqueeze(1))
        d2 = self.depth2(d1)
        return d1, d2, self.depth_proj(self.depth3(d2))

    def forward(self, rgbd):
        r = self.rgb_features(rgbd[:, :3])
        d = self.depth_features(rgbd[:, 3])
        return tuple(a + b for a, b in zip(r, d))


def _pool_tokens(x, patch, extent=1):
    """Mean over non-overlapping patches (padded area excluded), optionally over a wider window."""
    h, w = x.shape[-2:]
    ph, pw = -h % patch, -w % patch
    ones = x.new_ones((1, 1, h, w))
    xp = F.pad(x, (0, pw, 0, ph))
    op = F.pad(ones, (0, pw, 0, ph))
    k = patch * extent
    pad = patch * (extent - 1) // 2
    s = F.avg_pool2d(xp, k, stride=patch, padding=pad, count_include_pad=True)
    c = F.avg_pool2d(op, k, stride=patch, padding=pad, count_include_pad=True)
    return s / c.clamp_min(1e-12)


class CrossAttentionBlock(nn.Module):
    """Patch-token cross-attention from the target onto pooled reference tokens."""

    def __init__(self, dim, heads=1, mlp_ratio=2):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(),
                                 nn.Linear(dim * mlp_ratio, dim))

    def attend(self, t, refs):
        """``t`` (..., c) queries against ``refs`` (..., n, c); output before the residual."""
        hd = self.dim // self.heads
        q = self.q(t).unflatten(-1, (self.heads, hd))
        k = self.k(refs).unflatten(-1, (self.heads, hd))
        v = self.v(refs).unflatten(-1, (self.heads, hd))
        logits = torch.einsum("...hd,...nhd->...hn", q, k) / math.sqrt(hd)
        attn = logits.softmax(dim=-1)
        return torch.einsum("...hn,...nhd->...hd", attn, v).flatten(-2)

    def forward(self, t, refs):
        u = self.norm1(t + self.attend(t, refs))
        return u + self.mlp(u)


class Decoder(nn.Module):
    def __init__(self, embed_dim, channels, out_channels):
        super().__init__()
        c1, c2, _ = channels
        self.fuse = nn.Sequential(nn.Conv2d(2 * embed_dim, embed_dim, 1), nn.ReLU())
        self.up1 = nn.Sequential(_conv(embed_dim + c2, c2), nn.ReLU())
        self.up2 = nn.Sequential(_conv(c2 + c1, c1), nn.ReLU())
        self.head = nn.Conv2d(c1, out_channels, 1)

    def forward(self, f1, f2, t, t_tem):
        x = self.fuse(torch.cat([t, t_tem], 1))
        x = F.interpolate(x, size=f2.shape[-2:], mode="bilinear", align_corners=False)
        x = self.up1(torch.cat([x, f2], 1))
        x = F.interpolate(x, size=f1.shape[-2:], mode="bilinear", align_corners=False)
        x = self.up2(torch.cat([x, f1], 1))
        return self.head(x)


class StabilizerModel(nn.Module):
    """RGB-D encoder, cross-attention over reference frames, and fusing decoder.

    The same weights stabilize pre- and post-direction windows.
    """

    def __init__(self, config: StabilizerConfig | None = None):
        super().__init__()
        self.config = config or StabilizerConfig()
        c = self.config
        self.encoder = Encoder(c.encoder_channels, c.embed_dim)
        self.attention = CrossAttentionBlock(c.embed_dim, c.heads, c.mlp_ratio)
        self.decoder = Decoder(c.embed_dim, c.encoder_channels, c.out_channels)
        self.reset_parameters(c.seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif p.dim() == 1:  # layer-norm gains
                nn.init.ones_(p)
            else:
                fan_in = p[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                with torch.no_grad():
                    p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode(self, rgbd: torch.Tensor):
        """Per-frame features for (B, 4, H, W) inputs: ``(f1, f2, T)``."""
        h, w = rgbd.shape[-2:]
        if h < 4 or w < 4:
            raise ValueError("frames must be at least 4x4 for the encoder strides")
        return self.encoder(rgbd)

    def cross_attention(self, t: torch.Tensor, refs: torch.Tensor):
        """Target features (B, c, h, w) and reference features (B, n, c, h, w) to T_tem."""
        b, n, c, h, w = refs.shape
        p = self.config.patch
        tok = _pool_tokens(t, p)  # (B, c, gh, gw)
        rtok = _pool_tokens(refs.flatten(0, 1), p, self.config.pool_extent)
        gh, gw = tok.shape[-2:]
        rtok = rtok.view(b, n, c, gh, gw).permute(0, 3, 4, 1, 2)  # (B, gh, gw, n, c)
        q = tok.permute(0, 2, 3, 1)  # (B, gh, gw, c)
        out = self.attention(q, rtok).permute(0, 3, 1, 2)  # (B, c, gh, gw)
        hp, wp = gh * p, gw * p
        up = F.interpolate(out, size=(hp, wp), mode="bilinear", align_corners=False)
        return up[..., :h, :w]

    def decode(self, feats, t_tem):
        f1, f2, t = feats
        logits = self.decoder(f1, f2, t, t_tem)
        if self.config.out_channels == 1:
            return torch.sigmoid(logits[:, 0])
        return logits.softmax(dim=1)

    def forward_features(self, target_feats, ref_T):
        t_tem = self.cross_attention(target_feats[2], ref_T)
        return self.decode(target_feats, t_tem)

    def forward(self, target: torch.Tensor, refs: torch.Tensor):
        """``target`` (B, 4, H, W) and ``refs`` (B, n, 4, H, W), already normalized."""
        b, n = refs.shape[:2]
        feats = self.encode(torch.cat([target.unsqueeze(1), refs], 1).flatten(0, 1))
        feats = [f.unflatten(0, (b, n + 1)) for f in feats]
        tgt = [f[:, 0] for f in feats]
        return self.forward_features(tgt, feats[2][:, 1:])


def build_rgbd(rgb: torch.Tensor, depth: torch.Tensor, valid: Optional[torch.Tensor] = None,
               normalize: bool = True):
    """Stack (B, n, 3, H, W) frames with (B, n, H, W) depth into (B, n, 4, H, W)."""
    d = normalize_window_tensor(depth, valid) if normalize else depth
    if valid is not None and not normalize:
        d = torch.where(valid, d, torch.zeros_like(d))
    return torch.cat([rgb, d.unsqueeze(2)], 2)


def stabilize_window(model: StabilizerModel, rgb, depth, valid=None):
    """Stabilize the target (index 0) of a window of frames.

    ``rgb`` is (n+1, H, W, 3) or a tensor (B, n+1, 3, H, W); ``depth`` is raw
    predictor disparity (n+1, H, W) or (B, n+1, H, W). Returns a numpy (H, W)
    map for numpy inputs, otherwise a tensor.
    """
    as_numpy = isinstance(rgb, np.ndarray)
    if as_numpy:
        dtype = next(model.parameters()).dtype
        rgb = torch.from_numpy(np.ascontiguousarray(np.asarray(rgb).transpose(0, 3, 1, 2)))[None].to(dtype)
        depth_np = np.asarray(depth, dtype=np.float64)
        if valid is None:
            valid = np.isfinite(depth_np)
        valid = torch.from_numpy(np.asarray(valid))[None]
        depth = torch.from_numpy(np.nan_to_num(depth_np))[None].to(dtype)
    x = build_rgbd(rgb, depth, valid)
    with torch.set_grad_enabled(torch.is_grad_enabled() and not as_numpy):
        out = model(x[:, 0], x[:, 1:])
    if as_numpy:
        return out[0].detach().double().numpy()
    return out


# ---------------------------------------------------------------- checkpoints


@dataclass
class FrameFeatures:
    """Window-independent encoder outputs for one frame."""

    rgb: tuple
    depth: tuple  # linear features of depth * valid
    ones: tuple  # linear features of the validity mask


def encode_frame(model: StabilizerModel, rgb: torch.Tensor, depth: torch.Tensor,
                 valid: torch.Tensor) -> FrameFeatures:
    """Encode (B, 3, H, W) frames with raw (B, H, W) depth once, for reuse across windows."""
    enc = model.encoder
    v = valid.to(depth.dtype)
    d = torch.where(valid, depth, torch.zeros_like(depth))
    return FrameFeatures(enc.rgb_features(rgb), enc.depth_features(d), enc.depth_features(v))


def window_range(depths: Sequence[torch.Tensor], valids: Sequence[torch.Tensor]):
    """Joint (lo, span, degenerate) of raw depths, each (B, H, W)."""
    d = torch.stack(list(depths), 1)
    v = torch.stack(list(valids), 1)
    big = torch.finfo(d.dtype).max
    lo = torch.where(v, d, torch.full_like(d, big)).amin(dim=(1, 2, 3))
    hi = torch.where(v, d, torch.full_like(d, -big)).amax(dim=(1, 2, 3))
    span = hi - lo
    degenerate = span <= 0
    return lo, torch.where(degenerate, torch.ones_like(span), span), degenerate


def renormalize(feats: FrameFeatures, lo, span, degenerate):
    """Features of the frame as if its depth had been window-normalized with ``lo``/``span``."""
    out = []
    for r, d, o in zip(feats.rgb, feats.depth, feats.ones):
        shape = (-1,) + (1,) * (d.dim() - 1)
        lin = (d - lo.view(shape) * o) / span.view(shape)
        lin = torch.where(degenerate.view(shape), torch.zeros_like(lin), lin)
        out.append(r + lin)
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: StabilizerModel, path, extra: dict | None = None):
    """Write named float32 parameter arrays plus JSON metadata into one ``.npz`` file.

    Zip entries carry a fixed timestamp so identical parameters give identical bytes.
    """
    arrays = {name: p.detach().cpu().numpy().astype(np.float32)
              for name, p in model.state_dict().items()}
    meta = {"format": CHECKPOINT_FORMAT, "config": json.loads(model.config.to_json()),
            "seed": model.config.seed}
    if extra:
        meta.update(extra)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns ``(model, meta)``."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        config = StabilizerConfig(**meta["config"])
        model = StabilizerModel(config)
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    return model, meta

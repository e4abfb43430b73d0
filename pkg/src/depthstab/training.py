"""Training loop for the stabilizer on flicker-corrupted synthetic videos."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import window_indices
from .losses import LossWeights, window_loss
from .stabilizer import (FlickerParams, StabilizerModel, build_rgbd,
                         flicker_predictor, frame_seed)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 750
    batch: int = 8
    lr: float = 6e-4
    lr_decay_every: int = 0  # steps between decays; 0 disables
    lr_decay: float = 1e-4  # subtracted at each decay, floored at 10% of lr
    crop: int = 48
    clip_len: int = 2
    interval: int = 1
    flip: bool = True
    seed: int = 0
    val_every: int = 250
    resample_flicker: bool = True

    @classmethod
    def paper(cls):
        """Full-scale recipe: Adam at 6e-5, lowered by 1e-5 every five epochs, batch 9."""
        return cls(batch=9, lr=6e-5, lr_decay=1e-5, crop=384)


@dataclass
class PreparedSequence:
    rgb: torch.Tensor  # (N, 3, H, W)
    gt: torch.Tensor  # (N, H, W)
    valid: torch.Tensor  # (N, H, W) bool
    flow_bwd: torch.Tensor  # (N-1, 2, H, W); entry k maps frame k+1 to k (0-based)
    gt_np: list
    index: int = 0

    @property
    def n(self):
        return self.rgb.shape[0]


def prepare(seq, index: int = 0, dtype=torch.float32) -> PreparedSequence:
    rgb = torch.from_numpy(np.stack([f.rgb.transpose(2, 0, 1) for f in seq.frames])).to(dtype)
    gt_vals = np.stack([np.nan_to_num(d.values) for d in seq.gt_disparity])
    valid = torch.from_numpy(np.stack([d.valid for d in seq.gt_disparity]))
    flows = torch.from_numpy(np.stack([f.as_array().transpose(2, 0, 1) for f in seq.gt_flow_bwd]))
    return PreparedSequence(rgb, torch.from_numpy(gt_vals).to(dtype), valid, flows.to(dtype),
                            list(seq.gt_disparity), index)


def flicker_stack(ps: PreparedSequence, frames, params: FlickerParams, seed: int):
    """Raw predictor output for 0-based ``frames`` of a prepared sequence."""
    out = [np.nan_to_num(flicker_predictor(ps.gt_np[k], params, frame_seed(seed, ps.index, k)).values)
           for k in frames]
    return torch.from_numpy(np.stack(out))


class ClipSampler:
    """Random training clips: ``clip_len`` consecutive targets with their pre-direction windows."""

    def __init__(self, sequences, cfg: TrainConfig, n_ref: int, params: FlickerParams,
                 predictor_seed: int = 0):
        self.seqs = sequences
        self.cfg = cfg
        self.n_ref = n_ref
        self.params = params
        self.predictor_seed = predictor_seed

    def inputs(self, ps: PreparedSequence, frames, step: int):
        """Per-frame input channel (len(frames), H, W) for 0-based ``frames``."""
        seed = (self.predictor_seed if not self.cfg.resample_flicker
                else self.predictor_seed + 7919 * (step + 1))
        return flicker_stack(ps, frames, self.params, seed)

    def sample(self, step: int):
        """Batch for ``step``; depends only on the seed and step, so runs can resume."""
        cfg = self.cfg
        self.rng = np.random.default_rng([cfg.seed, step])
        items = []
        for _ in range(cfg.batch):
            ps = self.seqs[int(self.rng.integers(len(self.seqs)))]
            first = int(self.rng.integers(1, ps.n - cfg.clip_len + 2))  # 1-based
            targets = list(range(first, first + cfg.clip_len))
            windows = [[t] + window_indices(t, ps.n, self.n_ref, cfg.interval, "pre") for t in targets]
            needed = sorted({k for w in windows for k in w})
            depth = self.inputs(ps, [k - 1 for k in needed], step)
            pos = {k: i for i, k in enumerate(needed)}
            h, w = ps.rgb.shape[-2:]
            c = min(cfg.crop, h, w)
            y0 = int(self.rng.integers(0, h - c + 1))
            x0 = int(self.rng.integers(0, w - c + 1))
            flip = cfg.flip and self.rng.random() < 0.5
            sl = (slice(y0, y0 + c), slice(x0, x0 + c))
            idx = [k - 1 for k in needed]
            rgb = ps.rgb[idx][..., sl[0], sl[1]]
            d = depth[..., sl[0], sl[1]].to(rgb.dtype)
            valid = ps.valid[idx][..., sl[0], sl[1]]
            tidx = [t - 1 for t in targets]
            gt = ps.gt[tidx][..., sl[0], sl[1]]
            gvalid = ps.valid[tidx][..., sl[0], sl[1]]
            flows = ps.flow_bwd[[t - 2 for t in targets[1:]]][..., sl[0], sl[1]].clone()
            trgb = ps.rgb[tidx][..., sl[0], sl[1]]
            if flip:
                rgb, d, valid = rgb.flip(-1), d.flip(-1), valid.flip(-1)
                gt, gvalid, trgb = gt.flip(-1), gvalid.flip(-1), trgb.flip(-1)
                flows = flows.flip(-1)
                flows[:, 0] = -flows[:, 0]
            wsel = torch.tensor([[pos[k] for k in w] for w in windows])
            items.append(dict(rgb=rgb[wsel], depth=d[wsel], valid=valid[wsel], gt=gt,
                              gvalid=gvalid, flows=flows, frames=trgb))
        return {k: torch.stack([it[k] for it in items]) for k in items[0]}


def clip_forward(model: StabilizerModel, batch, normalize: bool = True):
    """Stabilized outputs (B, clip_len, ...) for a sampled batch."""
    rgb, depth, valid = batch["rgb"], batch["depth"], batch["valid"]
    b, t = rgb.shape[:2]
    x = build_rgbd(rgb.flatten(0, 1), depth.flatten(0, 1), valid.flatten(0, 1), normalize)
    out = model(x[:, 0], x[:, 1:])
    return out.view(b, t, *out.shape[1:])


def depth_objective(weights: LossWeights):
    def fn(model, batch):
        pred = clip_forward(model, batch)
        return window_loss(pred, batch["gt"], batch["flows"], batch["frames"], weights, batch["gvalid"])
    return fn


@dataclass
class TrainResult:
    history: list
    optimizer_state: dict
    step: int
    best_val: float = math.inf
    best_state: Optional[dict] = None


def lr_at(cfg: TrainConfig, step: int) -> float:
    if not cfg.lr_decay_every:
        return cfg.lr
    return max(cfg.lr - cfg.lr_decay * (step // cfg.lr_decay_every), 0.1 * cfg.lr)


def train(model: StabilizerModel, train_seqs, cfg: TrainConfig, weights: LossWeights | None = None,
          params: FlickerParams | None = None, predictor_seed: int = 0, validate=None,
          log_path=None, on_step=None, sampler=None, objective=None, resume: TrainResult | None = None,
          stop_at: Optional[int] = None) -> TrainResult:
    """Optimize ``model`` in place with Adam.

    ``validate(model) -> float`` is called every ``cfg.val_every`` steps; the
    parameters with the lowest value are restored at the end. A non-finite
    loss raises ``NumericalError``. ``resume`` continues from a previous
    result (optimizer state and step); ``stop_at`` ends early at that step.
    """
    weights = weights or LossWeights()
    params = params or FlickerParams()
    if sampler is None:
        prepared = [s if isinstance(s, PreparedSequence) else prepare(s, i)
                    for i, s in enumerate(train_seqs)]
        sampler = ClipSampler(prepared, cfg, model.config.n_ref, params, predictor_seed)
    objective = objective or depth_objective(weights)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    start = 0
    if resume is not None:
        opt.load_state_dict(resume.optimizer_state)
        start = resume.step
    history = []
    best = resume.best_val if resume else math.inf
    best_state = resume.best_state if resume else None
    running = math.inf
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    fh = open(log_path, "a" if resume else "w") if log_path else None
    try:
        for step in range(start, end):
            for g in opt.param_groups:
                g["lr"] = lr_at(cfg, step)
            batch = sampler.sample(step)
            model.train()
            total, parts = objective(model, batch)
            if not torch.isfinite(total):
                raise NumericalError(f"non-finite loss at step {step}: {parts}")
            opt.zero_grad()
            total.backward()
            opt.step()
            running = min(running, parts["total"])
            rec = {"step": step, **parts, "running_best": running}
            if validate is not None and ((step + 1) % cfg.val_every == 0 or step + 1 == cfg.steps):
                model.eval()
                score = float(validate(model))
                rec["val"] = score
                if score < best:
                    best = score
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_step:
                on_step(rec)
    finally:
        if fh:
            fh.close()
    result = TrainResult(history, opt.state_dict(), end, best, best_state)
    if best_state is not None and end == cfg.steps:
        model.load_state_dict(best_state)
    model.eval()
    return result

"""Semantic-segmentation variant: label windows in, per-pixel class probabilities out."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .flowops import relevance_map
from .inference import InferenceMode, Mode, VideoStabilizer, fuse_target, fusion_references, video_id
from .stabilizer import StabilizerModel, frame_seed
from .training import ClipSampler, PreparedSequence, TrainConfig, clip_forward, train

PROB_FLOOR = 1e-12
BOUNDARY_FACTOR = 3.0


@dataclass
class ProbabilityMap:
    probs: np.ndarray  # (H, W, C)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError("probabilities must be (H, W, C)")
        if (self.probs < 0).any() or not np.allclose(self.probs.sum(-1), 1.0, atol=1e-6):
            raise ValueError("probabilities must be non-negative and sum to one per pixel")

    @property
    def C(self):
        return self.probs.shape[-1]


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) int
    C: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise TypeError("labels must be integers")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.C):
            raise ValueError(f"labels must lie in [0, {self.C})")


def argmax_labels(p) -> LabelMap:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    probs = p.probs if isinstance(p, ProbabilityMap) else np.asarray(p)
    return LabelMap(np.argmax(probs, axis=-1), probs.shape[-1])


def boundary_mask(labels) -> np.ndarray:
    """Pixels with a 4-neighbour of a different class."""
    lab = np.asarray(labels)
    b = np.zeros(lab.shape, bool)
    dy = lab[1:] != lab[:-1]
    dx = lab[:, 1:] != lab[:, :-1]
    b[1:] |= dy
    b[:-1] |= dy
    b[:, 1:] |= dx
    b[:, :-1] |= dx
    return b


def flip_rates(labels, error_rate: float) -> np.ndarray:
    rate = np.full(np.shape(labels), float(error_rate))
    rate[boundary_mask(labels)] = min(1.0, BOUNDARY_FACTOR * error_rate)
    return rate


def flicker_segmenter(gt_labels, num_classes: int, error_rate: float = 0.15,
                      frame_seed: int = 0) -> LabelMap:
    """Flip each pixel to a random other class; boundary pixels flip three times as often."""
    if not 0.0 <= error_rate < 1.0:
        raise ValueError("error_rate must lie in [0, 1)")
    lab = gt_labels.labels if isinstance(gt_labels, LabelMap) else np.asarray(gt_labels)
    rng = np.random.default_rng(frame_seed)
    flip = rng.random(lab.shape) < flip_rates(lab, error_rate)
    offset = rng.integers(1, num_classes, size=lab.shape)
    return LabelMap(np.where(flip, (lab + offset) % num_classes, lab).astype(np.int64), num_classes)


class FlickerSegmenter:
    def __init__(self, num_classes: int, error_rate: float = 0.15, seed: int = 0):
        self.num_classes = num_classes
        self.error_rate = error_rate
        self.seed = seed

    def __call__(self, gt_labels, video: int, frame: int) -> LabelMap:
        return flicker_segmenter(gt_labels, self.num_classes, self.error_rate,
                                 frame_seed(self.seed, video, frame))

    def predict_video(self, seq) -> list:
        vid = video_id(seq)
        return [self(lab, vid, k) for k, lab in enumerate(seq.gt_labels)]


def encode_labels(labels, num_classes: int):
    """Label channel scaled into [0, 1]."""
    lab = labels.labels if isinstance(labels, LabelMap) else labels
    if isinstance(lab, torch.Tensor):
        return lab.to(torch.get_default_dtype()) / (num_classes - 1)
    return np.asarray(lab, dtype=np.float64) / (num_classes - 1)


def stabilize_seg_window(model: StabilizerModel, rgb, labels) -> ProbabilityMap:
    """Probabilities for the target (index 0) of a window of (n+1, H, W, 3) frames and labels."""
    c = model.config.out_channels
    dtype = next(model.parameters()).dtype
    rgb = torch.from_numpy(np.ascontiguousarray(np.asarray(rgb).transpose(0, 3, 1, 2))).to(dtype)
    lab = torch.from_numpy(encode_labels(np.stack([getattr(x, "labels", x) for x in labels]), c)).to(dtype)
    x = torch.cat([rgb, lab.unsqueeze(1)], 1)[None]
    with torch.no_grad():
        out = model(x[:, 0], x[:, 1:])
    return ProbabilityMap(out[0].double().numpy().transpose(1, 2, 0))


def cross_entropy_loss(probs, gt, valid=None):
    """Mean of -log p[gt] with probabilities floored at 1e-12.

    ``probs`` is (..., C, H, W) and ``gt`` (..., H, W); numpy inputs are
    accepted and give a float.
    """
    as_numpy = not isinstance(probs, torch.Tensor)
    if as_numpy:
        p = np.asarray(probs.probs if isinstance(probs, ProbabilityMap) else probs, dtype=np.float64)
        if isinstance(probs, ProbabilityMap):
            p = p.transpose(2, 0, 1)
        probs = torch.from_numpy(np.ascontiguousarray(p))
        gt = torch.from_numpy(np.asarray(getattr(gt, "labels", gt)))
    picked = probs.gather(-3, gt.long().unsqueeze(-3)).squeeze(-3)
    nll = -picked.clamp_min(PROB_FLOOR).log()
    if valid is not None:
        nll = nll[torch.as_tensor(valid, dtype=torch.bool)]
    loss = nll.mean()
    return float(loss) if as_numpy else loss


def _renormalize(p):
    return p / p.sum(-1, keepdims=True)


def bidirectional_probabilities(pre, post) -> list:
    return [ProbabilityMap(_renormalize((a.probs + b.probs) / 2.0)) for a, b in zip(pre, post)]


def fuse_probabilities(seq, pre, post, mode: InferenceMode | None = None) -> list:
    """Channel-wise flow-guided fusion of probability sequences, renormalized per pixel."""
    mode = mode or InferenceMode(Mode.FLOW_GUIDED)
    bi = [(a.probs + b.probs) / 2.0 for a, b in zip(pre, post)]
    out = []
    for n in range(1, len(bi) + 1):
        ws, rs = [], []
        for i in fusion_references(n, len(bi), mode.n_ref):
            ws.append(relevance_map(seq.flow(i, n), seq.flow(n, i), mode.alpha, mode.normalize_flow).weights)
            rs.append(bi[i - 1])
        out.append(ProbabilityMap(_renormalize(fuse_target(bi[n - 1], rs, ws, mode.beta))))
    return out


@dataclass
class SegResult:
    probs: list
    labels: list
    timing: dict
    initial: list = None


def stabilize_labels_video(seq, model: StabilizerModel, initial, mode="flow") -> SegResult:
    """Stabilize per-frame label predictions ``initial`` (list of LabelMap) in the given mode."""
    if not isinstance(mode, InferenceMode):
        mode = InferenceMode(Mode.parse(mode) if isinstance(mode, str) else mode)
    c = model.config.out_channels
    timing = {}
    t0 = time.perf_counter()
    vs = VideoStabilizer(model, seq, [np.asarray(getattr(q, "labels", q), float) for q in initial],
                         mode.n_ref, mode.interval, fixed_range=(0.0, c - 1))
    timing["encode_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()

    def run(direction):
        return [ProbabilityMap(o.double().numpy().transpose(1, 2, 0)) for o in vs.run_tensor(direction)]

    pre = run("pre") if mode.mode is not Mode.BACKWARD else None
    post = run("post") if mode.mode is not Mode.FORWARD else None
    timing["stabilize_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if mode.mode is Mode.FORWARD:
        probs = pre
    elif mode.mode is Mode.BACKWARD:
        probs = post
    elif mode.mode is Mode.BIDIRECTIONAL:
        probs = bidirectional_probabilities(pre, post)
    else:
        probs = fuse_probabilities(seq, pre, post, mode)
    timing["fusion_s"] = time.perf_counter() - t0
    timing["encoder_calls"] = vs.encoder_calls
    timing["window_calls"] = vs.window_calls
    return SegResult(probs, [argmax_labels(p) for p in probs], timing, list(initial))


# ---------------------------------------------------------------- training


def prepare_labels(seq, index: int = 0, dtype=torch.float32) -> PreparedSequence:
    rgb = torch.from_numpy(np.stack([f.rgb.transpose(2, 0, 1) for f in seq.frames])).to(dtype)
    labels = np.stack([np.asarray(x) for x in seq.gt_labels]).astype(np.int64)
    valid = torch.ones(labels.shape, dtype=torch.bool)
    flows = torch.from_numpy(np.stack([f.as_array().transpose(2, 0, 1) for f in seq.gt_flow_bwd]))
    return PreparedSequence(rgb, torch.from_numpy(labels), valid, flows.to(dtype), list(labels), index)


class LabelClipSampler(ClipSampler):
    """Clips whose fourth channel is a freshly corrupted, [0, 1]-scaled label map."""

    def __init__(self, sequences, cfg: TrainConfig, n_ref: int, num_classes: int,
                 error_rate: float = 0.15, seed: int = 0):
        super().__init__(sequences, cfg, n_ref, None, seed)
        self.num_classes = num_classes
        self.error_rate = error_rate

    def inputs(self, ps, frames, step):
        seed = self.predictor_seed + 7919 * (step + 1) if self.cfg.resample_flicker else self.predictor_seed
        out = [flicker_segmenter(ps.gt_np[k], self.num_classes, self.error_rate,
                                 frame_seed(seed, ps.index, k)).labels for k in frames]
        return torch.from_numpy(encode_labels(np.stack(out), self.num_classes))


def seg_objective(model, batch):
    probs = clip_forward(model, batch, normalize=False)  # (B, T, C, H, W)
    loss = cross_entropy_loss(probs, batch["gt"])
    return loss, {"CE": float(loss.detach()), "total": float(loss.detach())}


def train_segmenter(model: StabilizerModel, train_seqs, cfg: TrainConfig, error_rate: float = 0.15,
                    seed: int = 0, **kw):
    """Cross-entropy training of a stabilizer built with ``out_channels = C``."""
    prepared = [prepare_labels(s, i) for i, s in enumerate(train_seqs)]
    sampler = LabelClipSampler(prepared, cfg, model.config.n_ref, model.config.out_channels,
                               error_rate, seed)
    return train(model, None, cfg, sampler=sampler, objective=seg_objective, **kw)

"""Synthetic moving-shape videos with exact disparity, flow and labels, plus the
stereo annotation / filtering pipeline run on their left-right views.

Motion is integer-valued (pixels per frame) so that backward warping with the
generated flow reproduces textures exactly away from occlusions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import (DisparityMap, FlowField, Frame, VideoSequence, discretize_disparity,
                   dequantize_disparity)
from .flowops import flow_consistency_mask

BACKGROUND, SKY, RECT, DISK = 0, 1, 2, 3
CLASS_NAMES = ["background", "sky", "rect", "disk"]
NUM_CLASSES = len(CLASS_NAMES)

INVALID_PCT_MAX = 30.0
VERTICAL_PCT_MAX = 10.0
VERTICAL_PX = 2.0
HORIZONTAL_RANGE_MIN = 15.0


class SceneError(ValueError):
    pass


@dataclass
class ObjectSpec:
    shape: str  # "rect" or "disk"
    size: tuple  # (h, w) for rect, (2r, 2r) for disk
    disparity: float
    velocity: tuple  # (vx, vy) px/frame, integers
    start: tuple  # top-left (x, y) in frame 1
    texture_seed: int = 0


@dataclass
class SceneSpec:
    height: int = 48
    width: int = 64
    n_frames: int = 12
    bg_far: float = 0.2  # disparity at the top of the ground layer
    bg_near: float = 0.45  # disparity at the bottom row
    objects: list = field(default_factory=list)
    sky_fraction: float = 0.0
    sky_disparity: float = 0.02
    camera_pan: tuple = (0, 0)
    stereo_scale: float = 28.0  # pixels of stereo shift per unit disparity
    seed: int = 0

    def validate(self):
        if self.height < 8 or self.width < 8:
            raise SceneError("scene must be at least 8x8")
        if self.n_frames < 2:
            raise SceneError("scene needs at least two frames")
        if not 0 < self.bg_far <= self.bg_near <= 1:
            raise SceneError("background disparities must satisfy 0 < far <= near <= 1")
        if self.sky_fraction and not 0 < self.sky_disparity < self.bg_far:
            raise SceneError("sky must be farther than the background")
        for ob in self.objects:
            if ob.shape not in ("rect", "disk"):
                raise SceneError(f"unknown shape {ob.shape!r}")
            if not self.bg_near < ob.disparity <= 1:
                raise SceneError("objects must be closer than the background")
            if any(int(v) != v for v in ob.velocity) or any(int(v) != v for v in self.camera_pan):
                raise SceneError("velocities must be whole pixels per frame")

    def to_dict(self):
        d = asdict(self)
        d["objects"] = [asdict(o) for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["objects"] = [ObjectSpec(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in o.items()}) for o in d.get("objects", [])]
        d["camera_pan"] = tuple(d.get("camera_pan", (0, 0)))
        return cls(**d)


def _texture(rng, shape, base, sigma=1.2, amp=0.25):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape + (3,)), (sigma, sigma, 0))
    noise /= noise.std() + 1e-12
    return np.clip(np.asarray(base)[None, None] + amp * noise * 0.5, 0.0, 1.0)


def _object_mask(ob: ObjectSpec):
    h, w = int(ob.size[0]), int(ob.size[1])
    if ob.shape == "rect":
        return np.ones((h, w), bool)
    yy, xx = np.mgrid[0:h, 0:w]
    r = min(h, w) / 2.0
    return (yy + 0.5 - h / 2.0) ** 2 + (xx + 0.5 - w / 2.0) ** 2 <= r * r


class _Scene:
    """Precomputed textures and layer geometry for one SceneSpec."""

    def __init__(self, spec: SceneSpec):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        h, w, n = spec.height, spec.width, spec.n_frames
        px, py = (int(v) for v in spec.camera_pan)
        self.pan = (px, py)
        self.base = (max(0, px * (n - 1)), max(0, py * (n - 1)))
        self.world_h = h + abs(py) * (n - 1)
        self.world_w = w + abs(px) * (n - 1)
        wy = np.arange(self.world_h)
        sky_rows = int(round(spec.sky_fraction * h))
        # world rows above sky_rows (shifted by the base offset) are sky
        sky_edge = sky_rows + self.base[1]
        ground_rows = np.clip((wy - sky_edge) / max(self.world_h - sky_edge - 1, 1), 0.0, 1.0)
        self.world_disp = spec.bg_far + (spec.bg_near - spec.bg_far) * ground_rows
        self.world_sky = wy < sky_edge
        self.world_disp = np.where(self.world_sky, spec.sky_disparity, self.world_disp)
        ground = _texture(rng, (self.world_h, self.world_w), (0.45, 0.5, 0.35), sigma=1.5)
        shade = 0.6 + 0.4 * ground_rows[:, None, None]
        ground = np.clip(ground * shade, 0, 1)
        sky_tex = _texture(rng, (self.world_h, self.world_w), (0.55, 0.7, 0.95), sigma=3.0, amp=0.08)
        self.world_rgb = np.where(self.world_sky[:, None, None], sky_tex, ground)
        self.objects = sorted(spec.objects, key=lambda o: o.disparity)
        self.obj_masks = [_object_mask(o) for o in self.objects]
        self.obj_tex = []
        for ob, m in zip(self.objects, self.obj_masks):
            orng = np.random.default_rng(ob.texture_seed)
            base = orng.uniform(0.1, 0.9, size=3)
            self.obj_tex.append(_texture(orng, m.shape, base, sigma=1.0, amp=0.35))

    def object_origin(self, i, k):
        ob = self.objects[i]
        return int(ob.start[0] + ob.velocity[0] * k), int(ob.start[1] + ob.velocity[1] * k)

    def render(self, k, shift=None):
        """Render 0-based frame ``k``. ``shift`` maps a disparity to an x offset (right view)."""
        spec = self.spec
        h, w = spec.height, spec.width
        ys, xs = np.mgrid[0:h, 0:w]
        wy = ys - self.pan[1] * k + self.base[1]
        wx_f = xs - self.pan[0] * k + self.base[0]
        disp = self.world_disp[wy[:, 0]][:, None].repeat(w, 1)
        if shift is not None:
            wx_f = wx_f + np.rint(shift(disp)).astype(int)
        wx = np.clip(wx_f, 0, self.world_w - 1)
        rgb = self.world_rgb[wy, wx].copy()
        layer = np.full((h, w), -1)
        labels = np.where(self.world_sky[wy], SKY, BACKGROUND)
        for i, (ob, m, tex) in enumerate(zip(self.objects, self.obj_masks, self.obj_tex)):
            ox, oy = self.object_origin(i, k)
            if shift is not None:
                ox -= int(np.rint(shift(ob.disparity)))
            ly, lx = ys - oy, xs - ox
            inside = (ly >= 0) & (ly < m.shape[0]) & (lx >= 0) & (lx < m.shape[1])
            cov = np.zeros((h, w), bool)
            cov[inside] = m[ly[inside], lx[inside]]
            rgb[cov] = tex[ly[cov], lx[cov]]
            disp[cov] = ob.disparity
            layer[cov] = i
            labels[cov] = RECT if ob.shape == "rect" else DISK
        return rgb, disp, layer, labels

    def velocity_field(self, layer):
        vx = np.full(layer.shape, float(self.pan[0]))
        vy = np.full(layer.shape, float(self.pan[1]))
        for i, ob in enumerate(self.objects):
            vx[layer == i] = ob.velocity[0]
            vy[layer == i] = ob.velocity[1]
        return vx, vy


def _occlusion(layer_src, layer_dst, vx, vy, steps):
    h, w = layer_src.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + (vx * steps).astype(int)
    ty = ys + (vy * steps).astype(int)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    same = np.zeros((h, w), bool)
    same[inside] = layer_dst[ty[inside], tx[inside]] == layer_src[inside]
    return ~same


def generate_scene(spec: SceneSpec, pair_span: int = 3) -> VideoSequence:
    """Render a sequence with exact disparity, bidirectional flow, labels and a right view.

    Extra ground truth lives in ``seq.meta``: ``occluded_fwd``/``occluded_bwd``
    masks per consecutive pair, ``right_frames`` and the stereo flows
    ``stereo_lr``/``stereo_rl`` per frame. ``pair_flows`` holds exact flows
    between frames up to ``pair_span`` apart.
    """
    scene = _Scene(spec)
    n = spec.n_frames
    renders = [scene.render(k) for k in range(n)]
    frames = [Frame(r[0], k + 1) for k, r in enumerate(renders)]
    disps = [DisparityMap(r[1]) for r in renders]
    labels = [r[3].astype(np.int64) for r in renders]
    vel = [scene.velocity_field(r[2]) for r in renders]
    fwd, bwd, occ_f, occ_b = [], [], [], []
    for k in range(n - 1):
        vx, vy = vel[k]
        fwd.append(FlowField(vx, vy, k + 1, k + 2))
        occ_f.append(_occlusion(renders[k][2], renders[k + 1][2], vx, vy, 1))
        vx1, vy1 = vel[k + 1]
        bwd.append(FlowField(-vx1, -vy1, k + 2, k + 1))
        occ_b.append(_occlusion(renders[k + 1][2], renders[k][2], vx1, vy1, -1))
    pair = {}
    for k in range(n):
        vx, vy = vel[k]
        for d in range(-pair_span, pair_span + 1):
            if d != 0 and 0 <= k + d < n:
                pair[(k + 1, k + 1 + d)] = FlowField(vx * d, vy * d, k + 1, k + 1 + d)
    right, lr, rl = [], [], []
    s = spec.stereo_scale
    for k in range(n):
        rgb_r, disp_r, _, _ = scene.render(k, shift=lambda d: s * np.asarray(d))
        right.append(Frame(rgb_r, k + 1))
        zeros = np.zeros((spec.height, spec.width))
        lr.append(FlowField(-s * renders[k][1], zeros, k + 1, k + 1))
        rl.append(FlowField(s * disp_r, zeros, k + 1, k + 1))
    meta = {"spec": spec.to_dict(), "occluded_fwd": occ_f, "occluded_bwd": occ_b,
            "right_frames": right, "stereo_lr": lr, "stereo_rl": rl,
            "sky": [lab == SKY for lab in labels], "class_names": CLASS_NAMES}
    return VideoSequence(frames, disps, fwd, bwd, labels, fps=24.0,
                         name=f"scene_{spec.seed:05d}", pair_flows=pair, meta=meta)


def sample_scene_spec(seed: int, height: int = 48, width: int = 64, n_frames: int = 12,
                      n_objects=(1, 3), sky: bool = True, pan: bool = True) -> SceneSpec:
    """Draw a random benchmark scene: textured ground, optional sky band, 1-3 moving shapes."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(n_objects[0], n_objects[1] + 1))
    bg_far = float(rng.uniform(0.15, 0.3))
    bg_near = float(rng.uniform(0.4, 0.5))
    objects = []
    disps = np.sort(rng.uniform(0.6, 0.95, size=k))
    for i in range(k):
        shape = "rect" if rng.random() < 0.5 else "disk"
        if shape == "rect":
            size = (int(rng.integers(8, 17)), int(rng.integers(8, 21)))
        else:
            d = int(rng.integers(9, 17))
            size = (d, d)
        while True:
            vel = (int(rng.integers(-2, 3)), int(rng.integers(-1, 2)))
            if vel != (0, 0):
                break
        # start so the path over the clip stays mostly in frame
        span_x = vel[0] * (n_frames - 1)
        span_y = vel[1] * (n_frames - 1)
        x_lo, x_hi = max(-size[1] // 3, -span_x - size[1] // 3), min(width - 2 * size[1] // 3, width - span_x - 2 * size[1] // 3)
        y_lo, y_hi = max(height // 6, -span_y), min(height - size[0], height - span_y - size[0])
        x0 = int(rng.integers(x_lo, max(x_hi, x_lo + 1)))
        y0 = int(rng.integers(y_lo, max(y_hi, y_lo + 1)))
        objects.append(ObjectSpec(shape, size, float(disps[i]), vel, (x0, y0),
                                  int(rng.integers(0, 2**31 - 1))))
    camera_pan = (int(rng.integers(-1, 2)), 0) if pan else (0, 0)
    return SceneSpec(height, width, n_frames, bg_far, bg_near, objects,
                     float(rng.uniform(0.15, 0.3)) if sky else 0.0, 0.02, camera_pan,
                     28.0, seed)


# ---------------------------------------------------------------- annotation


def stereo_to_disparity(flow_lr: FlowField, flow_rl: FlowField):
    """Disparity in pixels from a rectified pair's bidirectional flow.

    Returns ``(disparity, valid, vertical)`` where ``valid`` is the
    forward-backward consistency mask and ``vertical`` the absolute vertical
    flow component, which rectified pairs should keep near zero.
    """
    valid = flow_consistency_mask(flow_lr, flow_rl)
    disp = DisparityMap(-flow_lr.u, valid)
    return disp, valid, np.abs(flow_lr.v)


def ensemble_sky_vote(masks, min_votes: int = 3, max_hole: int = 50) -> np.ndarray:
    """Majority vote over four sky masks, then fill small enclosed non-sky holes."""
    if len(masks) != 4:
        raise ValueError("ensemble_sky_vote expects exactly four masks")
    stack = np.stack([np.asarray(m, bool) for m in masks])
    sky = stack.sum(0) >= min_votes
    four = ndimage.generate_binary_structure(2, 1)
    holes, count = ndimage.label(~sky, structure=four)
    if count:
        sizes = ndimage.sum_labels(np.ones_like(holes), holes, index=np.arange(1, count + 1))
        border = np.unique(np.concatenate([holes[0], holes[-1], holes[:, 0], holes[:, -1]]))
        for lab, size in zip(range(1, count + 1), sizes):
            if size < max_hole and lab not in border:
                sky[holes == lab] = True
    return sky


def noisy_sky_masks(sky: np.ndarray, seed: int, flip: float = 0.04, n: int = 4):
    """Four imperfect sky masks simulating independent segmenters on a frame and its mirror."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        m = sky.copy()
        m ^= rng.random(sky.shape) < flip
        if sky.any():
            ys, xs = np.nonzero(sky)
            j = rng.integers(len(ys))
            r = int(rng.integers(1, 3))
            m[max(ys[j] - r, 0):ys[j] + r + 1, max(xs[j] - r, 0):xs[j] + r + 1] = False
        out.append(m)
    return out


@dataclass
class PipelineVerdict:
    accepted: bool
    reasons: list
    stats: dict


def filter_sample(stats: dict) -> PipelineVerdict:
    """Reject a sample on the three invalid-sample rules; stats are percentages and pixels."""
    reasons = []
    if stats["invalid_pct"] > INVALID_PCT_MAX:
        reasons.append("invalid_ratio")
    if stats["vert_gt2px_pct"] > VERTICAL_PCT_MAX:
        reasons.append("vertical_disparity")
    if stats["avg_horiz_range"] < HORIZONTAL_RANGE_MIN:
        reasons.append("horizontal_range")
    return PipelineVerdict(not reasons, reasons, dict(stats))


def disparity_stats(disparities, valids, verticals, video_range: bool = False) -> dict:
    valid = np.stack(valids)
    vert = np.stack(verticals)
    if video_range:
        sel = np.concatenate([d.values[v] for d, v in zip(disparities, valids)])
        horiz = float(sel.max() - sel.min()) if sel.size else 0.0
    else:
        ranges = [float(d.values[v].max() - d.values[v].min()) if v.any() else 0.0
                  for d, v in zip(disparities, valids)]
        horiz = float(np.mean(ranges))
    return {"invalid_pct": 100.0 * float((~valid).mean()),
            "vert_gt2px_pct": 100.0 * float((vert > VERTICAL_PX).mean()),
            "avg_horiz_range": horiz}


def finalize_ground_truth(disparities, sky_masks, valids):
    """Sky to the video minimum, per-video min-max normalization, 16-bit quantization.

    Returns ``(quantized, normalized)`` lists; invalid pixels are NaN in the
    normalized maps and 0 in the quantized ones.
    """
    lo = min(float(d.values[v | s].min()) for d, v, s in zip(disparities, valids, sky_masks)
             if (v | s).any())
    vals = [np.where(s, lo, d.values) for d, s in zip(disparities, sky_masks)]
    masks = [v | s for v, s in zip(valids, sky_masks)]
    hi = max(float(x[m].max()) for x, m in zip(vals, masks))
    lo = min(float(x[m].min()) for x, m in zip(vals, masks))
    if hi <= lo:
        raise SceneError("constant-disparity video cannot be normalized")
    quantized, normalized = [], []
    for x, m in zip(vals, masks):
        norm = np.clip(np.where(m, (x - lo) / (hi - lo), 0.0), 0.0, 1.0)
        q = discretize_disparity(DisparityMap(norm, m))
        quantized.append(q)
        normalized.append(DisparityMap(np.where(m, dequantize_disparity(q), np.nan), m))
    return quantized, normalized


@dataclass
class AnnotatedSequence:
    sequence: VideoSequence
    verdict: PipelineVerdict
    quantized: Optional[list] = None


def annotate(seq: VideoSequence, seed: int = 0) -> AnnotatedSequence:
    """Run the stereo annotation pipeline and replace ``gt_disparity`` by its output."""
    lr, rl = seq.meta["stereo_lr"], seq.meta["stereo_rl"]
    disps, valids, verts = [], [], []
    for a, b in zip(lr, rl):
        d, v, vert = stereo_to_disparity(a, b)
        disps.append(d)
        valids.append(v)
        verts.append(vert)
    verdict = filter_sample(disparity_stats(disps, valids, verts))
    if not verdict.accepted:
        return AnnotatedSequence(seq, verdict)
    skies = [ensemble_sky_vote(noisy_sky_masks(s, seed * 1000 + k))
             for k, s in enumerate(seq.meta["sky"])]
    quantized, normalized = finalize_ground_truth(disps, skies, valids)
    seq.gt_disparity = normalized
    seq.meta["sky_vote"] = skies
    return AnnotatedSequence(seq, verdict, quantized)


def benchmark_specs(n_train: int = 32, n_test: int = 8, seed: int = 0, **kw):
    """Scene specs for the desk benchmark; test scenes use disjoint seeds."""
    train = [sample_scene_spec(seed * 100003 + i, **kw) for i in range(n_train)]
    test = [sample_scene_spec(seed * 100003 + 50000 + i, **kw) for i in range(n_test)]
    return train, test


def build_benchmark(n_train: int = 32, n_test: int = 8, seed: int = 0, max_draws: int = 4,
                    records: list | None = None, **kw):
    """Generate and annotate the train/test split.

    Rejected samples are replaced by further draws from the same seed stream
    until each split holds the requested count (at most ``max_draws`` times
    the count are tried). Every draw is appended to ``records`` as
    ``(split, spec, verdict)`` when given.
    """
    out = []
    for split, n, offset in (("train", n_train, 0), ("test", n_test, 50000)):
        kept = []
        i = 0
        while len(kept) < n and i < max_draws * max(n, 1):
            sp = sample_scene_spec(seed * 100003 + offset + i, **kw)
            i += 1
            ann = annotate(generate_scene(sp), sp.seed)
            if records is not None:
                records.append((split, sp, ann.verdict))
            if ann.verdict.accepted:
                kept.append(ann.sequence)
        if len(kept) < n:
            raise SceneError(f"only {len(kept)} of {n} scenes passed the annotation filter")
        out.append(kept)
    return out[0], out[1]

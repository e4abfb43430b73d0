"""Command line: generate, train, infer and eval, sharing one JSON run configuration."""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import sys
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io as dio
from .inference import InferenceMode, Mode, stabilize_video, video_id
from .losses import LossWeights
from .metrics import align_video, evaluate, evaluate_video, opw_curve
from .segext import FlickerSegmenter, cross_entropy_loss, stabilize_labels_video, train_segmenter
from .stabilizer import (FlickerDepthPredictor, FlickerParams, StabilizerConfig, StabilizerModel,
                         load_checkpoint, save_checkpoint)
from .synthdata import CLASS_NAMES, NUM_CLASSES, SceneError, build_benchmark
from .training import NumericalError, TrainConfig, TrainResult, train

log = logging.getLogger("depthstab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# Temporal weight at desk scale. With the full-scale 0.2 the spatial terms
# dominate a 130k-parameter model and held-out OPW only falls to ~0.6x input.
DESK_LAMBDA = 5.0


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 32
    n_test: int = 8
    height: int = 48
    width: int = 64
    n_frames: int = 12
    n_val: int = 4  # trailing training sequences scored for checkpoint selection


@dataclass
class InferConfig:
    mode: str = "forward"
    alpha: float = 10.0
    beta: float = 0.5
    normalize_flow: bool = False

    def to_mode(self) -> InferenceMode:
        return InferenceMode(Mode.parse(self.mode), self.alpha, self.beta, self.normalize_flow)


@dataclass
class RunConfig:
    task: str = "depth"
    seed: int = 0
    predictor_seed: int = 1
    eval_predictor_seed: int = 2
    data: DataConfig = field(default_factory=DataConfig)
    model: StabilizerConfig = field(default_factory=StabilizerConfig)
    loss: LossWeights = field(default_factory=lambda: LossWeights(lambda_temporal=DESK_LAMBDA))
    optim: TrainConfig = field(default_factory=TrainConfig)
    flicker: FlickerParams = field(default_factory=FlickerParams)
    seg_error_rate: float = 0.15
    infer: InferConfig = field(default_factory=InferConfig)

    @classmethod
    def preset(cls, name: str = "desk") -> "RunConfig":
        if name == "desk":
            return cls()
        if name == "paper":
            return cls(optim=TrainConfig.paper(), loss=LossWeights())
        raise ConfigError(f"unknown preset {name!r}")

    def validate(self) -> "RunConfig":
        if self.task not in ("depth", "seg"):
            raise ConfigError("task must be 'depth' or 'seg'")
        d, o = self.data, self.optim
        if min(d.n_train, d.n_test, d.height, d.width, d.n_frames) <= 0 or d.n_val < 0:
            raise ConfigError("data sizes must be positive")
        if min(o.steps, o.batch, o.lr, o.crop, o.clip_len, o.interval, o.val_every) <= 0:
            raise ConfigError("optimizer settings must be positive")
        if o.clip_len < 2:
            raise ConfigError("clip_len must be at least 2 for the temporal term")
        if not 0.0 <= self.seg_error_rate < 1.0:
            raise ConfigError("seg_error_rate must lie in [0, 1)")
        try:
            self.infer.to_mode()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.task == "seg" and self.model.out_channels < 2:
            raise ConfigError("segmentation needs out_channels = number of classes")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def _build(cls, doc):
    if not isinstance(doc, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        if f.name not in doc:
            continue
        v = doc[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            v = _build(hint, v)
        elif isinstance(getattr(defaults, f.name), tuple):
            v = tuple(v)
        kw[f.name] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


def load_config(path=None, preset: str = "desk", seed=None, mode=None, task=None) -> RunConfig:
    cfg = RunConfig.preset(preset)
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        base = cfg.to_dict()
        _merge(base, doc)
        cfg = RunConfig.from_dict(base)
    if seed is not None:
        cfg.seed = seed
        cfg.optim.seed = seed
        cfg.model.seed = seed
    if mode is not None:
        cfg.infer.mode = mode
    if task is not None:
        cfg.task = task
    if cfg.task == "seg" and cfg.model.out_channels == 1:
        cfg.model = dataclasses.replace(cfg.model, out_channels=NUM_CLASSES)
    return cfg.validate()


def _merge(base: dict, over: dict):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, out) -> dict:
    """Write train/ and test/ splits plus manifest.json; returns the manifest."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise dio.DataError(f"cannot create {out}: {e}") from e
    d = cfg.data
    records = []
    train_seqs, test_seqs = build_benchmark(d.n_train, d.n_test, cfg.seed, records=records,
                                            height=d.height, width=d.width, n_frames=d.n_frames)
    specs = {(split, sp.seed): sp for split, sp, _ in records}
    for split, seqs in (("train", train_seqs), ("test", test_seqs)):
        for seq in seqs:
            sp = specs[(split, seq.meta["spec"]["seed"])]
            dio.write_sequence(out / split / seq.name, seq,
                               {"spec": sp.to_dict(), "class_names": CLASS_NAMES, "split": split})
    draws = [{"split": split, "seed": sp.seed, "name": f"scene_{sp.seed:05d}",
              "accepted": v.accepted, "reasons": v.reasons, "stats": v.stats}
             for split, sp, v in records]
    manifest = {"seed": cfg.seed, "draws": draws,
                "requested": len(draws),
                "rejected": sum(not r["accepted"] for r in draws),
                "accepted": {"train": len(train_seqs), "test": len(test_seqs)}}
    dio.write_json(out / "manifest.json", manifest)
    dio.write_json(out / "config.json", cfg.to_dict())
    return manifest


def load_split(root) -> list:
    dirs = dio.list_sequences(root)
    if not dirs:
        raise dio.DataError(f"no sequences under {root}")
    return [dio.read_sequence(p) for p in dirs]


def _require(seqs, attr, what):
    for s in seqs:
        if getattr(s, attr) is None:
            raise dio.DataError(f"{s.name}: missing {what}")


def _depth_validator(seqs, cfg):
    pred = FlickerDepthPredictor(cfg.flicker, cfg.eval_predictor_seed + 7)

    def score(model):
        return float(np.mean([evaluate_video(s, stabilize_video(s, pred, model, "forward").depths)["opw"]
                              for s in seqs]))
    return score


def _seg_validator(seqs, cfg):
    seg = FlickerSegmenter(cfg.model.out_channels, cfg.seg_error_rate, cfg.eval_predictor_seed + 7)

    def score(model):
        out = []
        for s in seqs:
            r = stabilize_labels_video(s, model, seg.predict_video(s), "forward")
            out.append(np.mean([cross_entropy_loss(p, np.asarray(g)) for p, g in zip(r.probs, s.gt_labels)]))
        return float(np.mean(out))
    return score


def cmd_train(cfg: RunConfig, data, out, resume: bool = False, stop_at=None) -> TrainResult:
    """Train on ``data`` (a generated dataset root or its train/ split)."""
    data = Path(data)
    root = data / "train" if (data / "train").is_dir() else data
    seqs = load_split(root)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    val = seqs[-cfg.data.n_val:] if cfg.data.n_val else []
    state = None
    torch.manual_seed(cfg.seed)
    model = StabilizerModel(cfg.model)
    if resume:
        state_path = out / "train_state.pt"
        if not state_path.exists():
            raise dio.DataError(f"nothing to resume in {out}")
        saved = torch.load(state_path, weights_only=False)
        model.load_state_dict(saved["model"])
        state = TrainResult([], saved["optimizer"], saved["step"], saved["best_val"], saved.get("best_state"))
    common = dict(validate=None, log_path=out / "loss_log.jsonl", resume=state, stop_at=stop_at)
    if cfg.task == "depth":
        _require(seqs, "gt_disparity", "disparity")
        _require(seqs, "gt_flow_bwd", "backward flow")
        common["validate"] = _depth_validator(val, cfg) if val else None
        res = train(model, seqs, cfg.optim, cfg.loss, cfg.flicker, cfg.predictor_seed, **common)
    else:
        _require(seqs, "gt_labels", "labels")
        common["validate"] = _seg_validator(val, cfg) if val else None
        res = train_segmenter(model, seqs, cfg.optim, cfg.seg_error_rate, cfg.predictor_seed, **common)
    save_checkpoint(model, out / "model.ckpt", {"task": cfg.task, "run_config": cfg.to_dict(),
                                                "steps": res.step})
    torch.save({"model": model.state_dict(), "optimizer": res.optimizer_state, "step": res.step,
                "best_val": res.best_val, "best_state": res.best_state}, out / "train_state.pt")
    return res


def _initial_depths(seq, cfg):
    """Precomputed predictor outputs in ``init/`` when present, else the flicker predictor."""
    init_dir = Path(seq.meta.get("_root", "")) / "init"
    if init_dir.is_dir():
        maps = [dio.read_pfm(p) for p in sorted(init_dir.glob("*.pfm"))]
        if len(maps) != len(seq):
            raise dio.DataError(f"{seq.name}: {len(maps)} initial maps for {len(seq)} frames")
        return maps
    if seq.gt_disparity is None:
        raise dio.DataError(f"{seq.name}: no disparity to drive the predictor and no init/ maps")
    pred = FlickerDepthPredictor(cfg.flicker, cfg.eval_predictor_seed)
    vid = video_id(seq)
    return [pred(seq.gt_disparity[k], vid, k) for k in range(len(seq))]


def cmd_infer(cfg: RunConfig, ckpt, data, out, mode=None) -> list:
    """Stabilize every sequence under ``data`` (dataset root, split or sequence dir)."""
    model, meta = load_checkpoint(ckpt)
    task = meta.get("task", "depth")
    if task != cfg.task:
        raise dio.DataError(f"checkpoint was trained for {task!r}, config asks for {cfg.task!r}")
    data = Path(data)
    root = data / "test" if (data / "test").is_dir() else data
    inf_mode = cfg.infer.to_mode()
    if mode is not None:
        inf_mode = dataclasses.replace(inf_mode, mode=Mode.parse(mode))
    out = Path(out)
    written = []
    for p in dio.list_sequences(root) or []:
        seq = dio.read_sequence(p)
        seq.meta["_root"] = str(p)
        dst = out / seq.name
        dst.mkdir(parents=True, exist_ok=True)
        if task == "depth":
            init = _initial_depths(seq, cfg)
            res = stabilize_video(seq, None, model, inf_mode, initial=init)
            dio.write_disparities(dst, res.depths)
            dio.write_disparities(dst / "initial", init)
            n_out = len(res.depths)
        else:
            if seq.gt_labels is None:
                raise dio.DataError(f"{seq.name}: labels needed to drive the segmenter")
            c = model.config.out_channels
            init = FlickerSegmenter(c, cfg.seg_error_rate, cfg.eval_predictor_seed).predict_video(seq)
            res = stabilize_labels_video(seq, model, init, inf_mode)
            (dst / "labels").mkdir(exist_ok=True)
            (dst / "initial" / "labels").mkdir(parents=True, exist_ok=True)
            (dst / "probs").mkdir(exist_ok=True)
            for k, (lab, q, pm) in enumerate(zip(res.labels, init, res.probs), 1):
                dio.write_labels(dst / "labels" / f"{k:04d}.png", lab.labels)
                dio.write_labels(dst / "initial" / "labels" / f"{k:04d}.png", q.labels)
                np.save(dst / "probs" / f"{k:04d}.npy", pm.probs.astype(np.float32))
            n_out = len(res.labels)
        if n_out != len(seq):
            raise dio.DataError(f"{seq.name}: produced {n_out} outputs for {len(seq)} frames")
        timing = dict(res.timing)
        timing["mode"] = inf_mode.mode.value
        dio.write_json(dst / "timing.json", timing)
        written.append(dst)
    if not written:
        raise dio.DataError(f"no sequences under {root}")
    return written


def _pred_labels(d: Path):
    return [dio.read_labels(p) for p in sorted((d / "labels").glob("*.png"))]


def cmd_eval(cfg: RunConfig, pred, gt, out=None, plots: bool = False, timestamp=None,
             include_initial: bool = True) -> dict:
    """Score predictions against ground truth; writes report.json (and plots) into ``out``."""
    pred, gt = Path(pred), Path(gt)
    gt_root = gt / "test" if (gt / "test").is_dir() else gt
    gt_seqs = {s.name: s for s in load_split(gt_root)}
    pred_dirs = sorted(p for p in pred.iterdir() if p.is_dir()) if pred.is_dir() else []
    if not pred_dirs:
        raise dio.DataError(f"no predictions under {pred}")
    seqs, preds, labels, initial, init_labels = [], [], [], [], []
    for d in pred_dirs:
        if d.name not in gt_seqs:
            raise dio.DataError(f"no ground truth for {d.name}")
        seq = gt_seqs[d.name]
        seqs.append(seq)
        if cfg.task == "depth":
            maps = dio.read_disparities(d)
            if len(maps) != len(seq):
                raise dio.DataError(f"{d.name}: {len(maps)} predictions for {len(seq)} frames")
            preds.append(maps)
            init = dio.read_disparities(d / "initial") if (d / "initial" / "disp").is_dir() else None
            initial.append(init)
        else:
            labels.append(_pred_labels(d))
            init_labels.append(_pred_labels(d / "initial") if (d / "initial" / "labels").is_dir() else None)
    if cfg.task == "depth":
        report = evaluate(seqs, preds)
        extra = {}
        if include_initial and all(i is not None for i in initial):
            extra["initial"] = evaluate(seqs, initial).overall()
    else:
        report = evaluate(seqs, None, labels)
        extra = {}
        if include_initial and all(i is not None for i in init_labels):
            extra["initial"] = evaluate(seqs, None, init_labels).overall()
    ts = timestamp or _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    doc = json.loads(report.to_json(cfg.to_dict(), ts))
    doc.update(extra)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        dio.write_json(out / "report.json", doc)
        if plots and cfg.task == "depth":
            for seq, p, i in zip(seqs, preds, initial):
                write_plots(out / "plots", seq, p, i)
    return doc


def write_plots(out, seq, preds, initial=None):
    """Per-frame OPW curve and a scanline-over-time slice for one video."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    series = {"stabilized": align_video(preds, seq.gt_disparity)}
    if initial is not None:
        series["initial"] = align_video(initial, seq.gt_disparity)
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, maps in series.items():
        ax.plot(range(2, len(seq) + 1), opw_curve(maps, seq.gt_flow_bwd, seq.frames), marker="o", label=name)
    ax.set_xlabel("frame")
    ax.set_ylabel("OPW")
    ax.set_title(seq.name)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / f"{seq.name}_opw.png", dpi=80, metadata={"Software": None})
    plt.close(fig)

    row = seq.shape[0] // 2
    panels = [("ground truth", seq.gt_disparity)] + [(k, v) for k, v in series.items()]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 2.4))
    for ax, (name, maps) in zip(np.atleast_1d(axes), panels):
        img = np.stack([np.where(m.valid, m.values, np.nan)[row] for m in maps])
        ax.imshow(img, aspect="auto", cmap="magma", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("x")
        ax.set_ylabel("frame")
    fig.tight_layout()
    fig.savefig(out / f"{seq.name}_slice.png", dpi=80, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------- argparse


def _parser():
    p = argparse.ArgumentParser(prog="depthstab", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (merged over the preset)")
    common.add_argument("--preset", choices=["desk", "paper"], default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--task", choices=["depth", "seg"])
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write the synthetic benchmark")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a stabilizer")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-at", type=int, help="stop after this many steps; continue later with --resume")

    i = sub.add_parser("infer", parents=[common], help="stabilize sequences with a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--mode", choices=["forward", "backward", "bi", "flow"])
    i.add_argument("--beta", type=float)

    for name in ("eval", "report"):
        e = sub.add_parser(name, parents=[common], help="score predictions")
        e.add_argument("--pred", required=True)
        e.add_argument("--gt", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--plots", action="store_true")
        e.add_argument("--timestamp", help="value recorded in the report instead of the current time")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset, args.seed, getattr(args, "mode", None), args.task)
        if getattr(args, "beta", None) is not None:
            cfg.infer.beta = args.beta
            cfg.validate()
        if args.command == "generate":
            m = cmd_generate(cfg, args.out)
            print(json.dumps(m["accepted"]))
        elif args.command == "train":
            res = cmd_train(cfg, args.data, args.out, args.resume, args.stop_at)
            print(json.dumps({"steps": res.step, "best_val": res.best_val}))
        elif args.command == "infer":
            written = cmd_infer(cfg, args.checkpoint, args.data, args.out)
            print(json.dumps({"sequences": len(written)}))
        else:
            doc = cmd_eval(cfg, args.pred, args.gt, args.out, args.plots, args.timestamp)
            print(json.dumps(doc["overall"], sort_keys=True))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (dio.DataError, SceneError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

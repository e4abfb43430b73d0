"""On-disk formats: PFM disparity, Middlebury .flo flow, PNG frames/labels/masks and the sequence layout.

Layout of one sequence directory::

    frames/%04d.png      8-bit RGB
    disp/%04d.pfm        float32 disparity, NaN marks invalid pixels
    flow_fwd/%04d.flo    frame k -> k+1, named by k
    flow_bwd/%04d.flo    frame k -> k-1, named by k
    flow_pairs/%04d_%04d.flo   optional exact flows between non-adjacent frames
    labels/%04d.png      paletted class labels
    meta.json
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .core import DisparityMap, FlowField, Frame, VideoSequence

FLO_MAGIC = 202021.25
PALETTE = [(0, 0, 0), (70, 130, 180), (220, 20, 60), (250, 170, 30), (107, 142, 35), (152, 251, 152),
           (119, 11, 32), (0, 0, 142), (190, 153, 153), (153, 153, 153)]


class DataError(RuntimeError):
    """Missing or malformed input data."""


# ---------------------------------------------------------------- PFM


def write_pfm(path, dmap) -> None:
    """Single-channel little-endian PFM; invalid pixels are stored as NaN."""
    if isinstance(dmap, DisparityMap):
        arr = np.where(dmap.valid, dmap.values, np.nan)
    else:
        arr = np.asarray(dmap, dtype=np.float64)
    arr = arr.astype("<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.flipud(arr).tobytes())


def read_pfm(path) -> DisparityMap:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise DataError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        scale = float(fh.readline().strip())
        w, h = int(dims[0]), int(dims[1])
        ch = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * ch:
        raise DataError(f"{path}: truncated PFM")
    arr = np.flipud(data.reshape(h, w, ch)[..., 0] if ch == 3 else data.reshape(h, w))
    return DisparityMap(arr.astype(np.float64))


# ---------------------------------------------------------------- .flo


def write_flo(path, flow) -> None:
    uv = flow.as_array() if isinstance(flow, FlowField) else np.asarray(flow)
    h, w = uv.shape[:2]
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], "<f4").tobytes())
        fh.write(np.array([w, h], "<i4").tobytes())
        fh.write(uv.astype("<f4").tobytes())


def read_flo(path, src_index: int = 1, dst_index: int = 2) -> FlowField:
    with open(path, "rb") as fh:
        magic = np.frombuffer(fh.read(4), "<f4")
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise DataError(f"{path}: bad .flo magic")
        w, h = np.frombuffer(fh.read(8), "<i4")
        data = np.frombuffer(fh.read(), "<f4")
    if data.size != w * h * 2:
        raise DataError(f"{path}: truncated .flo")
    return FlowField.from_array(data.reshape(h, w, 2).astype(np.float64), src_index, dst_index)


# ---------------------------------------------------------------- PNG


def write_frame(path, frame) -> None:
    rgb = frame.rgb if isinstance(frame, Frame) else np.asarray(frame)
    Image.fromarray(np.clip(np.floor(rgb * 255 + 0.5), 0, 255).astype(np.uint8), "RGB").save(path)


def read_frame(path, index: int = 1) -> Frame:
    return Frame(np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0, index)


def write_labels(path, labels) -> None:
    lab = np.asarray(getattr(labels, "labels", labels))
    if lab.min() < 0 or lab.max() > 255:
        raise ValueError("paletted PNG holds class ids 0..255")
    img = Image.fromarray(lab.astype(np.uint8), "P")
    flat = [c for rgb in PALETTE for c in rgb]
    img.putpalette(flat + [0] * (768 - len(flat)))
    img.save(path)


def read_labels(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "P" and img.mode != "L":
        raise DataError(f"{path}: labels must be a paletted or grey PNG")
    return np.asarray(img, dtype=np.int64)


def write_mask(path, mask) -> None:
    Image.fromarray(np.asarray(mask, bool)).convert("1").save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("1"), dtype=bool)


# ---------------------------------------------------------------- sequences


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_sequence(root, seq: VideoSequence, meta: dict | None = None, pair_flows: bool = True) -> Path:
    root = Path(root)
    for sub in ("frames", "disp", "flow_fwd", "flow_bwd", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(seq.frames, 1):
        write_frame(root / "frames" / f"{k:04d}.png", f)
    if seq.gt_disparity is not None:
        for k, d in enumerate(seq.gt_disparity, 1):
            write_pfm(root / "disp" / f"{k:04d}.pfm", d)
    if seq.gt_flow_fwd is not None:
        for k, f in enumerate(seq.gt_flow_fwd, 1):
            write_flo(root / "flow_fwd" / f"{k:04d}.flo", f)
    if seq.gt_flow_bwd is not None:
        for k, f in enumerate(seq.gt_flow_bwd, 2):
            write_flo(root / "flow_bwd" / f"{k:04d}.flo", f)
    if seq.gt_labels is not None:
        for k, lab in enumerate(seq.gt_labels, 1):
            write_labels(root / "labels" / f"{k:04d}.png", lab)
    if pair_flows and seq.pair_flows:
        (root / "flow_pairs").mkdir(exist_ok=True)
        for (s, d), f in sorted(seq.pair_flows.items()):
            if abs(s - d) > 1:
                write_flo(root / "flow_pairs" / f"{s:04d}_{d:04d}.flo", f)
    doc = {"name": seq.name, "fps": seq.fps, "n_frames": len(seq)}
    doc.update(meta or {})
    write_json(root / "meta.json", doc)
    return root


def _numbered(d: Path, ext: str) -> list:
    return sorted(d.glob(f"*{ext}")) if d.is_dir() else []


def read_sequence(root) -> VideoSequence:
    root = Path(root)
    frames_p = _numbered(root / "frames", ".png")
    if not frames_p:
        raise DataError(f"{root}: no frames")
    frames = [read_frame(p, k) for k, p in enumerate(frames_p, 1)]
    n = len(frames)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8")) if (root / "meta.json").exists() else {}
    disp_p = _numbered(root / "disp", ".pfm")
    disp = [read_pfm(p) for p in disp_p] if disp_p else None
    fwd_p = _numbered(root / "flow_fwd", ".flo")
    fwd = [read_flo(p, k, k + 1) for k, p in enumerate(fwd_p, 1)] if fwd_p else None
    bwd_p = _numbered(root / "flow_bwd", ".flo")
    bwd = [read_flo(p, k + 1, k) for k, p in enumerate(bwd_p, 1)] if bwd_p else None
    lab_p = _numbered(root / "labels", ".png")
    labels = [read_labels(p) for p in lab_p] if lab_p else None
    for name, items in (("disp", disp), ("labels", labels)):
        if items is not None and len(items) != n:
            raise DataError(f"{root}: {len(items)} {name} files for {n} frames")
    for name, items in (("flow_fwd", fwd), ("flow_bwd", bwd)):
        if items is not None and len(items) != n - 1:
            raise DataError(f"{root}: {len(items)} {name} files for {n} frames")
    pairs = {}
    for p in _numbered(root / "flow_pairs", ".flo"):
        m = re.fullmatch(r"(\d+)_(\d+)", p.stem)
        if m:
            s, d = int(m.group(1)), int(m.group(2))
            pairs[(s, d)] = read_flo(p, s, d)
    return VideoSequence(frames, disp, fwd, bwd, labels, float(meta.get("fps", 24.0)),
                         meta.get("name", root.name), pairs, meta)


def list_sequences(root) -> list:
    """Sequence directories under ``root`` (those holding a frames/ folder), sorted by name."""
    root = Path(root)
    if (root / "frames").is_dir():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "frames").is_dir()) if root.is_dir() else []


def write_disparities(root, maps) -> None:
    (Path(root) / "disp").mkdir(parents=True, exist_ok=True)
    for k, d in enumerate(maps, 1):
        write_pfm(Path(root) / "disp" / f"{k:04d}.pfm", d)


def read_disparities(root) -> list:
    return [read_pfm(p) for p in _numbered(Path(root) / "disp", ".pfm")]

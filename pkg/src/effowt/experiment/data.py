"""Synthetic open-world videos: coloured shapes drifting over a noisy background.

Training videos contain only known shapes; evaluation videos mix known and
unknown ones. Every training frame gets an augmentation record (horizontal
flip, optionally followed by a centre crop) so that the two views of an
object share an identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..backbone import ConfigurationError
from ..checkpoint import atomic_write_bytes, atomic_write_text
from ..owta import TrackRecord, TrackSet, parse_track_file, write_track_file
from .config import DataConfig, ExperimentConfig, to_jsonable


def shape_mask(shape: str, size: int) -> np.ndarray:
    i, j = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    if shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "circle":
        m = (i - c) ** 2 + (j - c) ** 2 <= (size / 2.0) ** 2
    elif shape == "triangle":
        m = np.abs(j - c) <= (i + 1) / 2.0
    elif shape == "cross":
        t = size / 6.0
        m = (np.abs(i - c) <= t) | (np.abs(j - c) <= t)
    elif shape == "diamond":
        m = np.abs(i - c) + np.abs(j - c) <= size / 2.0
    elif shape == "ring":
        d = (i - c) ** 2 + (j - c) ** 2
        m = (d <= (size / 2.0) ** 2) & (d >= (size / 4.0) ** 2)
    else:
        raise ConfigurationError(f"unknown shape {shape!r}")
    return m


def tight_box(mask: np.ndarray, x0: int, y0: int) -> tuple[float, float, float, float]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (float(x0 + cols[0]), float(y0 + rows[0]),
            float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))


@dataclass
class _Object:
    track_id: int
    shape: str
    color: np.ndarray
    size: int
    pos: np.ndarray
    vel: np.ndarray


def _spawn(rng, k: int, shape: str, cfg: DataConfig) -> _Object:
    size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    lim = cfg.image_size - size
    return _Object(
        track_id=k, shape=shape, color=rng.uniform(0.35, 1.0, 3), size=size,
        pos=rng.uniform(0, lim, 2), vel=rng.uniform(-3.0, 3.0, 2))


def _advance(o: _Object, image_size: int) -> None:
    lim = image_size - o.size
    o.pos = o.pos + o.vel
    for a in range(2):
        if o.pos[a] < 0:
            o.pos[a], o.vel[a] = -o.pos[a], -o.vel[a]
        if o.pos[a] > lim:
            o.pos[a], o.vel[a] = 2 * lim - o.pos[a], -o.vel[a]
        o.pos[a] = min(max(o.pos[a], 0.0), lim)


def render_video(rng, video: str, shapes: list[str], cfg: DataConfig):
    """Returns (uint8 frames [F, S, S, 3], list[TrackRecord])."""
    s = cfg.image_size
    objs = [_spawn(rng, k, sh, cfg) for k, sh in enumerate(shapes)]
    frames, records = [], []
    for f in range(cfg.frames_per_video):
        img = rng.uniform(0.0, 0.15, (s, s, 3))
        for o in objs:
            x0, y0 = (int(round(v)) for v in o.pos)
            m = shape_mask(o.shape, o.size)
            img[y0:y0 + o.size, x0:x0 + o.size][m] = o.color
            records.append(TrackRecord(video, f, o.track_id, tight_box(m, x0, y0), o.shape, 1.0))
        frames.append(np.round(img * 255.0).astype(np.uint8))
        for o in objs:
            _advance(o, s)
    return np.stack(frames), records


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    if img.ndim == 2:
        atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    else:
        atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end].decode())
        pos = end
    pos += 1
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise ValueError(f"{path}: only 8-bit binary PGM/PPM is supported")
    ch = 3 if magic == "P6" else 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    return arr.reshape((h, w, ch) if ch == 3 else (h, w)).copy()


# -- augmentation ------------------------------------------------------------------------------

def flip_box(box, width: float) -> tuple[float, float, float, float]:
    x, y, w, h = box
    return (float(width - x - w), float(y), float(w), float(h))


def crop_box(box, margin: int, image_size: int):
    """Box after cropping ``margin`` pixels from every side and rescaling back.
    Returns None if nothing of the box survives."""
    inner = image_size - 2 * margin
    scale = image_size / inner
    x, y, w, h = box
    x0, y0 = max(x - margin, 0.0), max(y - margin, 0.0)
    x1, y1 = min(x + w - margin, inner), min(y + h - margin, inner)
    if x1 - x0 < 1 or y1 - y0 < 1:
        return None
    return (x0 * scale, y0 * scale, (x1 - x0) * scale, (y1 - y0) * scale)


def apply_augmentation(img: np.ndarray, flip: bool, crop: int) -> np.ndarray:
    """[H, W, C] uint8 image -> augmented image of the same size."""
    out = img[:, ::-1] if flip else img
    if crop:
        s = img.shape[0]
        idx = margin_index(s, crop)
        out = out[np.ix_(idx, idx)]
    return np.ascontiguousarray(out)


def margin_index(size: int, margin: int) -> np.ndarray:
    inner = size - 2 * margin
    return margin + (np.arange(size) * inner) // size


def augment_record(boxes: list[TrackRecord], image_size: int, flip: bool, crop: int) -> list[dict]:
    out = []
    for r in boxes:
        b = flip_box(r.bbox, image_size) if flip else r.bbox
        if crop:
            b = crop_box(b, crop, image_size)
        if b is None:
            continue
        out.append({"track_id": r.track_id, "class": r.cls, "bbox": list(r.bbox), "aug_bbox": list(b)})
    return out


# -- dataset -----------------------------------------------------------------------------------

def _choose_shapes(rng, cfg: DataConfig, split: str) -> list[str]:
    if split == "train" or not cfg.unknown_shapes:
        return [str(rng.choice(cfg.known_shapes)) for _ in range(cfg.objects_per_video)]
    out = []
    for k in range(cfg.objects_per_video):
        vocab = cfg.unknown_shapes if k % 2 == 0 else cfg.known_shapes
        out.append(str(rng.choice(vocab)))
    return out


def frame_path(root: Path, split: str, video: str, frame: int) -> Path:
    return root / split / "frames" / video / f"{frame:04d}.ppm"


def gen_data(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Write the train and eval splits under ``out``; returns a summary."""
    dcfg = cfg.data
    root = Path(out)
    rng = np.random.default_rng(cfg.data_seed)
    summary = {"image_size": dcfg.image_size, "known_shapes": list(dcfg.known_shapes),
               "unknown_shapes": list(dcfg.unknown_shapes), "splits": {}}
    for split, n in (("train", dcfg.n_videos), ("eval", dcfg.n_eval_videos)):
        records, pairs = [], []
        for v in range(n):
            video = f"{split}_{v:03d}"
            frames, recs = render_video(rng, video, _choose_shapes(rng, dcfg, split), dcfg)
            for f, img in enumerate(frames):
                write_ppm(frame_path(root, split, video, f), img)
            records.extend(recs)
            if split == "train":
                by_frame: dict[int, list[TrackRecord]] = {}
                for r in recs:
                    by_frame.setdefault(r.frame, []).append(r)
                for f in sorted(by_frame):
                    crop = int(rng.integers(0, int(dcfg.crop * dcfg.image_size) + 1)) if dcfg.crop else 0
                    pairs.append({"video": video, "frame": f,
                                  "image": frame_path(root, split, video, f).relative_to(root).as_posix(),
                                  "flip": True, "crop": crop,
                                  "boxes": augment_record(by_frame[f], dcfg.image_size, True, crop)})
        ts = TrackSet(records)
        if split == "train":
            leaked = {r.cls for r in ts} & set(dcfg.unknown_shapes)
            if leaked:
                raise AssertionError(f"unknown shapes {sorted(leaked)} leaked into the train split")
            atomic_write_text(root / split / "pairs.jsonl",
                              "".join(json.dumps(p, sort_keys=True) + "\n" for p in pairs))
        write_track_file(ts, root / split / "gt.jsonl")
        summary["splits"][split] = {"videos": n, "frames": n * dcfg.frames_per_video, "records": len(ts)}
    summary["data"] = to_jsonable(dcfg)
    summary["seed"] = cfg.data_seed
    atomic_write_text(root / "meta.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


@dataclass
class Dataset:
    root: Path
    meta: dict

    @classmethod
    def open(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        try:
            meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"{root} is not a dataset directory (run gen-data first): {exc}") from exc
        return cls(root, meta)

    def gt(self, split: str) -> TrackSet:
        return parse_track_file(self.root / split / "gt.jsonl")

    def pairs(self) -> list[dict]:
        text = (self.root / "train" / "pairs.jsonl").read_text(encoding="utf-8")
        return [json.loads(line) for line in text.splitlines() if line.strip()]

    def image(self, split: str, video: str, frame: int) -> np.ndarray:
        return read_ppm(frame_path(self.root, split, video, frame))

    @property
    def known_shapes(self) -> list[str]:
        return list(self.meta["known_shapes"])

    @property
    def image_size(self) -> int:
        return int(self.meta["image_size"])


def to_chw(img: np.ndarray) -> np.ndarray:
    """uint8 [H, W, 3] -> float64 [3, H, W] in [0, 1]."""
    return np.transpose(img.astype(np.float64) / 255.0, (2, 0, 1))

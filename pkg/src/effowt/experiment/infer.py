from __future__ import annotations

from pathlib import Path

import numpy as np

from ..autograd import Tensor, no_grad, ops
from ..checkpoint import load_checkpoint
from ..heads import Tracker
from ..model import EffOWTModel
from ..owta import TrackRecord, TrackSet, write_track_file
from .config import ExperimentConfig
from .data import Dataset, to_chw
from .train import build_model


def load_trained(cfg: ExperimentConfig, checkpoint: str | Path) -> EffOWTModel:
    """Rebuild the model for ``cfg`` and load ``checkpoint`` (prefix, or a run directory)."""
    ckpt = Path(checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "model"
    if ckpt.suffix in (".bin", ".json"):
        ckpt = ckpt.with_suffix("")
    model = build_model(cfg)
    model.load_state_dict(load_checkpoint(ckpt))
    return model


def infer_video(model: EffOWTModel, ds: Dataset, split: str, video: str,
                frames: dict[int, list[TrackRecord]], sim_threshold: float, momentum: float) -> list[TrackRecord]:
    """Ground-truth boxes act as class-agnostic proposals; ids come from appearance alone."""
    tracker = Tracker(sim_threshold, momentum)
    out = []
    for f in sorted(frames):
        recs = frames[f]
        boxes = np.array([r.bbox for r in recs], dtype=np.float64).reshape(-1, 4)
        img = to_chw(ds.image(split, video, f))[None]
        with no_grad():
            heads = model(Tensor(img), [boxes])
            probs = ops.softmax(heads.class_logits, axis=-1).data
        ids = tracker.step(heads.embeddings.data)
        objectness = 1.0 - probs[:, -1]
        for box, tid, s in zip(boxes, ids, objectness):
            out.append(TrackRecord(video, f, int(tid), tuple(float(v) for v in box), "object",
                                   float(np.clip(s, 0.0, 1.0))))
    return out


def infer_tracks(cfg: ExperimentConfig, checkpoint: str | Path, data_dir: str | Path,
                 out: str | Path | None = None, split: str = "eval", videos: list[str] | None = None) -> TrackSet:
    ds = Dataset.open(data_dir)
    model = load_trained(cfg, checkpoint)
    gt = ds.gt(split).grouped()
    preds = []
    for video in sorted(gt) if videos is None else videos:
        preds.extend(infer_video(model, ds, split, video, gt[video], cfg.tracking.sim_threshold,
                                 cfg.tracking.momentum))
    ts = TrackSet(preds)
    if out is not None:
        write_track_file(ts, out)
    return ts

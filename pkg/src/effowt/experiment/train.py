from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autograd import AdamW, Tensor, detect_anomaly, first_nonfinite_op, instrument
from ..checkpoint import atomic_write_text, save_checkpoint
from ..heads import reid_contrastive_loss
from ..model import EffOWTModel, classification_loss
from .config import ExperimentConfig, dumps_config
from .data import Dataset, apply_augmentation, read_ppm, to_chw

log = logging.getLogger("effowt.train")


class TrainingError(RuntimeError):
    pass


def build_model(cfg: ExperimentConfig, strategy: str | None = None) -> EffOWTModel:
    rng = np.random.default_rng(cfg.seed)
    return EffOWTModel(cfg.backbone, cfg.side, cfg.head_config(), strategy or cfg.strategy, rng)


@dataclass
class Batch:
    images: np.ndarray
    boxes: list[np.ndarray]
    labels: np.ndarray
    ids: np.ndarray


class PairSampler:
    """Draws training frames and stacks each with its augmented view."""

    def __init__(self, ds: Dataset, seed: int):
        self.ds = ds
        self.pairs = ds.pairs()
        if not self.pairs:
            raise TrainingError("the train split has no frames")
        self.class_index = {c: i for i, c in enumerate(ds.known_shapes)}
        keys = sorted({(p["video"], b["track_id"]) for p in self.pairs for b in p["boxes"]})
        self.identity = {k: i for i, k in enumerate(keys)}
        self.rng = np.random.default_rng([seed, 1])
        self._cache: dict[str, np.ndarray] = {}

    def _image(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            self._cache[rel] = read_ppm(self.ds.root / rel)
        return self._cache[rel]

    def sample(self, batch: int) -> Batch:
        idx = self.rng.choice(len(self.pairs), size=min(batch, len(self.pairs)), replace=False)
        images, boxes, labels, ids = [], [], [], []
        views = []
        for i in sorted(int(v) for v in idx):
            p = self.pairs[i]
            img = self._image(p["image"])
            views.append((img, [b["bbox"] for b in p["boxes"]], p))
            views.append((apply_augmentation(img, p["flip"], p["crop"]), [b["aug_bbox"] for b in p["boxes"]], p))
        for img, bx, p in views:
            images.append(to_chw(img))
            boxes.append(np.array(bx, dtype=np.float64).reshape(-1, 4))
            for b in p["boxes"]:
                labels.append(self.class_index[b["class"]])
                ids.append(self.identity[(p["video"], b["track_id"])])
        return Batch(np.stack(images), boxes, np.array(labels, dtype=np.int64), np.array(ids, dtype=np.int64))


def batch_loss(model: EffOWTModel, batch: Batch, cfg: ExperimentConfig):
    out = model(Tensor(batch.images), batch.boxes)
    cls = classification_loss(out, batch.labels)
    total = cls * cfg.loss.cls_weight
    reid = None
    if cfg.loss.reid_weight and len(np.unique(batch.ids)) >= 2:
        reid = reid_contrastive_loss(out.embeddings, batch.ids, cfg.loss.temperature)
        total = total + reid * cfg.loss.reid_weight
    return total, cls, reid


@dataclass
class TrainResult:
    strategy: str
    losses: list[float]
    cls_losses: list[float]
    reid_losses: list[float]
    peak_bytes: list[int]
    checkpoint: Path | None = None
    files: dict[str, Path] = field(default_factory=dict)

    @property
    def window(self) -> int:
        return max(1, len(self.losses) // 10)

    @property
    def initial_loss(self) -> float:
        return float(np.mean(self.losses[:self.window]))

    @property
    def final_loss(self) -> float:
        return float(np.mean(self.losses[-self.window:]))

    def summary(self) -> dict:
        return {"strategy": self.strategy, "steps": len(self.losses), "initial_loss": self.initial_loss,
                "final_loss": self.final_loss, "loss_window": self.window,
                "peak_retained_bytes": int(max(self.peak_bytes)) if self.peak_bytes else 0}


def train(cfg: ExperimentConfig, data_dir: str | Path, out_dir: str | Path | None = None,
          model: EffOWTModel | None = None, plot: bool = True) -> TrainResult:
    """Run ``cfg.optimizer.steps`` AdamW steps of classification + ReID loss.

    With ``out_dir`` the run writes ``model.bin``/``model.json``,
    ``loss_curve.csv`` (+ ``.png``), ``train_summary.json`` and ``config.json``.
    """
    ds = Dataset.open(data_dir)
    if ds.image_size != cfg.backbone.image_size:
        raise TrainingError(f"dataset images are {ds.image_size}px but the backbone expects {cfg.backbone.image_size}px")
    if list(ds.known_shapes) != list(cfg.data.known_shapes):
        raise TrainingError(f"dataset known shapes {ds.known_shapes} != config {list(cfg.data.known_shapes)}")
    model = model or build_model(cfg)
    sampler = PairSampler(ds, cfg.seed)
    o = cfg.optimizer
    opt = AdamW(model.trainable_parameters(), lr=o.lr, betas=o.betas, weight_decay=o.weight_decay)
    res = TrainResult(cfg.strategy, [], [], [], [])
    for step in range(o.steps):
        batch = sampler.sample(o.batch)
        opt.zero_grad()
        with instrument() as rec:
            total, cls, reid = batch_loss(model, batch, cfg)
            value = float(total.data)
            if not np.isfinite(value):
                raise TrainingError(_nonfinite_message(model, batch, cfg, step, value))
            total.backward()
        opt.step()
        res.losses.append(value)
        res.cls_losses.append(float(cls.data))
        res.reid_losses.append(float(reid.data) if reid is not None else float("nan"))
        res.peak_bytes.append(rec.stats().peak_retained_bytes)
        if step % max(1, o.steps // 10) == 0 or step == o.steps - 1:
            log.info("step %d/%d loss %.4f", step + 1, o.steps, value)
    if out_dir is not None:
        res.files = write_run(res, model, cfg, Path(out_dir), plot)
        res.checkpoint = Path(out_dir) / "model"
    return res


def _nonfinite_message(model, batch, cfg, step, value) -> str:
    with detect_anomaly():
        batch_loss(model, batch, cfg)
        op = first_nonfinite_op()
    return f"loss became {value} at step {step + 1}; first non-finite value produced by op {op or 'unknown'!r}"


def loss_curve_csv(res: TrainResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "cls_loss", "reid_loss", "peak_retained_bytes"])
    for i, (l, c, r, b) in enumerate(zip(res.losses, res.cls_losses, res.reid_losses, res.peak_bytes)):
        w.writerow([i + 1, repr(l), repr(c), "" if np.isnan(r) else repr(r), b])
    return buf.getvalue()


def write_run(res: TrainResult, model: EffOWTModel, cfg: ExperimentConfig, out: Path, plot: bool) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    bin_path, json_path = save_checkpoint(model.state_dict(), out / "model")
    files = {"checkpoint_bin": bin_path, "checkpoint_manifest": json_path,
             "loss_curve": out / "loss_curve.csv", "summary": out / "train_summary.json",
             "config": out / "config.json"}
    atomic_write_text(files["loss_curve"], loss_curve_csv(res))
    atomic_write_text(files["summary"], json.dumps(res.summary(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(files["config"], dumps_config(cfg))
    if plot:
        from ..plotting import plot_loss_curve
        files["loss_plot"] = plot_loss_curve(res.losses, out / "loss_curve.png", title=f"training loss ({res.strategy})")
    return files

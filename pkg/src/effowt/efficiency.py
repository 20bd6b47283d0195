"""Trainable-parameter and training-memory accounting for the four strategies."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import AdamW, instrument
from .backbone import BackboneConfig
from .checkpoint import atomic_write_text
from .model import (STRATEGIES, EffOWTModel, HeadConfig, LossConfig, StrategySpec, compute_loss,
                    get_strategy)
from .side import SideConfig

STRATEGY_ORDER = ("full", "zero_shot", "side", "side_sim")
CSV_HEADER = ("strategy", "trainable_params", "param_ratio", "peak_bytes", "memory_ratio")
DEFAULT_BUDGET_BYTES = 3 * 1024 ** 3


class MemoryBudgetError(MemoryError):
    pass


def count_params(model: EffOWTModel, spec: StrategySpec | None = None) -> dict[str, int]:
    spec = spec or model.strategy
    trainable = total = 0
    by_ns: dict[str, int] = {}
    for name, p in model.named_parameters():
        total += p.size
        if spec.trainable(name):
            trainable += p.size
            ns = name.split(".", 1)[0]
            by_ns[ns] = by_ns.get(ns, 0) + p.size
    return {"trainable": trainable, "total": total, "trainable_by_namespace": by_ns}


def meta_model(backbone_cfg: BackboneConfig, side_cfg: SideConfig, head_cfg: HeadConfig,
               strategy: str) -> EffOWTModel:
    """Shape-only model: parameters are unallocated zero views, enough to count."""
    return EffOWTModel(backbone_cfg, side_cfg, head_cfg, strategy, rng=None)


def synthetic_batch(backbone_cfg: BackboneConfig, batch: int, seed: int = 0, boxes_per_image: int = 2,
                    num_classes: int = 2):
    """Random images with fixed boxes; box k of every image shares id k."""
    if batch < 2:
        raise ValueError("memory measurement needs batch >= 2 so the ReID loss has positives")
    rng = np.random.default_rng(seed)
    s = backbone_cfg.image_size
    images = rng.random((batch, 3, s, s))
    boxes, labels, ids = [], [], []
    for _ in range(batch):
        bx = []
        for k in range(boxes_per_image):
            w = h = s // 4
            x = (k * s // boxes_per_image) % (s - w)
            bx.append((x, s // 4, w, h))
            labels.append(k % (num_classes + 1))
            ids.append(k)
        boxes.append(np.array(bx, dtype=np.float64))
    return images, boxes, np.array(labels), np.array(ids)


@dataclass
class MemoryMeasurement:
    peak_retained_bytes: int
    backbone_retained_bytes: int
    grad_bytes: int
    optimizer_bytes: int
    iterations: int
    per_iteration: list[int] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return self.peak_retained_bytes + self.grad_bytes + self.optimizer_bytes


def measure_memory(model: EffOWTModel, batch, iterations: int = 3,
                   loss_cfg: LossConfig = LossConfig(),
                   budget_bytes: int = DEFAULT_BUDGET_BYTES) -> MemoryMeasurement:
    """Average peak retained-activation bytes of instrumented training steps.

    Weights are excluded; gradient buffers and AdamW moments for the trainable
    parameters are reported alongside.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    images, boxes, labels, ids = batch
    opt = AdamW(model.trainable_parameters(), lr=0.0)
    peaks, backbone_bytes, grad_bytes = [], 0, 0
    for _ in range(iterations):
        opt.zero_grad()
        try:
            with instrument() as rec:
                loss = compute_loss(model, images, boxes, labels, ids, loss_cfg)
                fwd = rec.stats()
                if fwd.peak_retained_bytes > budget_bytes:
                    raise MemoryBudgetError(
                        f"retained activations reach {fwd.peak_retained_bytes / 2**20:.1f} MiB, over the "
                        f"{budget_bytes / 2**20:.0f} MiB budget; reduce the batch size")
                loss.backward()
        except MemoryError as exc:
            if isinstance(exc, MemoryBudgetError):
                raise
            raise MemoryBudgetError(f"out of memory during the training step; reduce the batch size ({exc})") from exc
        stats = rec.stats()
        peaks.append(stats.peak_retained_bytes)
        backbone_bytes = stats.bytes_under("backbone")
        grad_bytes = int(sum(p.grad.nbytes for p in model.trainable_parameters() if p.grad is not None))
        opt.step()
    opt.zero_grad()
    return MemoryMeasurement(
        peak_retained_bytes=int(round(np.mean(peaks))),
        backbone_retained_bytes=int(backbone_bytes),
        grad_bytes=grad_bytes,
        optimizer_bytes=opt.state_bytes(),
        iterations=iterations,
        per_iteration=[int(p) for p in peaks],
    )


@dataclass
class StrategyRow:
    strategy: str
    trainable_params: int
    total_params: int
    param_ratio: float
    trainable_by_namespace: dict[str, int]
    peak_bytes: int | None = None
    memory_ratio: float | None = None
    backbone_retained_bytes: int | None = None
    grad_bytes: int | None = None
    optimizer_bytes: int | None = None
    total_memory_bytes: int | None = None
    total_memory_ratio: float | None = None


@dataclass
class EfficiencyReport:
    config: dict
    rows: list[StrategyRow]

    def row(self, strategy: str) -> StrategyRow:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "strategies": [asdict(r) for r in self.rows]},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EfficiencyReport":
        obj = json.loads(text)
        return cls(obj["config"], [StrategyRow(**r) for r in obj["strategies"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.strategy, r.trainable_params, _fmt(r.param_ratio), _fmt_int(r.peak_bytes),
                        _fmt(r.memory_ratio)])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def _fmt_int(x: int | None) -> str:
    return "" if x is None else str(int(x))


def _strategies(names) -> list[str]:
    names = list(STRATEGY_ORDER) if names in (None, "all") else ([names] if isinstance(names, str) else list(names))
    for n in names:
        get_strategy(n)
    return names


def params_report(backbone_cfg: BackboneConfig, side_cfg: SideConfig, head_cfg: HeadConfig,
                  strategies=None) -> EfficiencyReport:
    names = _strategies(strategies)
    full_total = count_params(meta_model(backbone_cfg, side_cfg, head_cfg, "full"))["trainable"]
    rows = []
    for name in names:
        c = count_params(meta_model(backbone_cfg, side_cfg, head_cfg, name))
        rows.append(StrategyRow(name, c["trainable"], c["total"], c["trainable"] / full_total,
                                c["trainable_by_namespace"]))
    return EfficiencyReport(_config_summary(backbone_cfg, side_cfg, head_cfg), rows)


def memory_report(backbone_cfg: BackboneConfig, side_cfg: SideConfig, head_cfg: HeadConfig,
                  strategies=None, batch: int = 2, iterations: int = 3, seed: int = 0,
                  loss_cfg: LossConfig = LossConfig(),
                  budget_bytes: int = DEFAULT_BUDGET_BYTES) -> EfficiencyReport:
    """Parameter counts plus measured memory; ratios are against ``full``."""
    names = _strategies(strategies)
    data = synthetic_batch(backbone_cfg, batch, seed, num_classes=head_cfg.num_classes)
    measured: dict[str, tuple[dict, MemoryMeasurement]] = {}
    for name in dict.fromkeys(["full", *names]):
        model = EffOWTModel(backbone_cfg, side_cfg, head_cfg, name, rng=np.random.default_rng(seed))
        measured[name] = (count_params(model), measure_memory(model, data, iterations, loss_cfg, budget_bytes))
        del model
    full_c, full_m = measured["full"]
    rows = []
    for name in names:
        c, m = measured[name]
        rows.append(StrategyRow(
            name, c["trainable"], c["total"], c["trainable"] / full_c["trainable"],
            c["trainable_by_namespace"],
            peak_bytes=m.peak_retained_bytes,
            memory_ratio=m.peak_retained_bytes / full_m.peak_retained_bytes,
            backbone_retained_bytes=m.backbone_retained_bytes,
            grad_bytes=m.grad_bytes, optimizer_bytes=m.optimizer_bytes,
            total_memory_bytes=m.total_bytes,
            total_memory_ratio=m.total_bytes / full_m.total_bytes))
    cfg = _config_summary(backbone_cfg, side_cfg, head_cfg)
    cfg.update({"batch": batch, "iterations": iterations, "seed": seed})
    return EfficiencyReport(cfg, rows)


def _config_summary(backbone_cfg, side_cfg, head_cfg) -> dict:
    return {
        "backbone": asdict(backbone_cfg),
        "side": {"r": side_cfg.r, "N": side_cfg.N,
                 "scales": [[s.dim_divisor, s.num_blocks] for s in side_cfg.scales],
                 "sim_scales": sorted(side_cfg.sim_scales)},
        "head": asdict(head_cfg),
    }


def emit_report(report: EfficiencyReport, out_dir: str | Path, stem: str) -> dict[str, Path]:
    """Write ``<stem>.json`` and ``<stem>.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"json": out_dir / f"{stem}.json", "csv": out_dir / f"{stem}.csv"}
        atomic_write_text(paths["json"], report.to_json())
        atomic_write_text(paths["csv"], report.to_csv())
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return paths


__all__ = [
    "CSV_HEADER", "EfficiencyReport", "MemoryBudgetError", "MemoryMeasurement", "STRATEGIES",
    "STRATEGY_ORDER", "StrategyRow", "count_params", "emit_report", "measure_memory", "memory_report",
    "meta_model", "params_report", "synthetic_batch",
]

"""Experiment configuration: one JSON document, strictly parsed."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..backbone import BackboneConfig, ConfigurationError
from ..model import STRATEGIES, HeadConfig, LossConfig
from ..side import ScaleSpec, SideConfig

SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    steps: int = 120
    batch: int = 2

    def __post_init__(self):
        if self.kind != "adamw":
            raise ConfigurationError(f"optimizer.kind must be 'adamw', got {self.kind!r}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigurationError(f"optimizer.betas must be two values in [0, 1), got {self.betas}")
        if self.lr < 0:
            raise ConfigurationError("optimizer.lr must be >= 0")
        if self.steps < 1 or self.batch < 1:
            raise ConfigurationError("optimizer.steps and optimizer.batch must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 64
    n_videos: int = 4
    n_eval_videos: int = 2
    frames_per_video: int = 8
    objects_per_video: int = 3
    known_shapes: tuple[str, ...] = ("square", "circle")
    unknown_shapes: tuple[str, ...] = ("triangle", "cross")
    min_size: int = 12
    max_size: int = 20
    crop: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "known_shapes", tuple(self.known_shapes))
        object.__setattr__(self, "unknown_shapes", tuple(self.unknown_shapes))
        overlap = set(self.known_shapes) & set(self.unknown_shapes)
        if overlap:
            raise ConfigurationError(f"known and unknown shapes overlap: {sorted(overlap)}")
        for s in self.known_shapes + self.unknown_shapes:
            if s not in SHAPES:
                raise ConfigurationError(f"unknown shape {s!r}; available: {SHAPES}")
        if not self.known_shapes:
            raise ConfigurationError("at least one known shape is required")
        if self.n_videos < 1 or self.frames_per_video < 1 or self.objects_per_video < 1:
            raise ConfigurationError("n_videos, frames_per_video and objects_per_video must be >= 1")
        if self.n_eval_videos < 0:
            raise ConfigurationError("n_eval_videos must be >= 0")
        if not 2 <= self.min_size <= self.max_size < self.image_size:
            raise ConfigurationError("need 2 <= min_size <= max_size < image_size")
        if not 0.0 <= self.crop < 0.5:
            raise ConfigurationError("crop must be in [0, 0.5)")


@dataclass(frozen=True)
class TrackingConfig:
    sim_threshold: float = 0.5
    momentum: float = 0.5

    def __post_init__(self):
        if not -1.0 < self.sim_threshold < 1.0:
            raise ConfigurationError("tracking.sim_threshold must lie in (-1, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("tracking.momentum must lie in [0, 1)")


@dataclass(frozen=True)
class HeadSection:
    emb_dim: int = 64
    hidden: int = 128


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    side: SideConfig = field(default_factory=SideConfig)
    strategy: str = "side"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    head: HeadSection = field(default_factory=HeadSection)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; expected one of {sorted(STRATEGIES)}")
        if self.data.image_size != self.backbone.image_size:
            raise ConfigurationError(
                f"data.image_size {self.data.image_size} != backbone.image_size {self.backbone.image_size}")
        self.side.validate(self.backbone)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def head_config(self) -> HeadConfig:
        return HeadConfig(num_classes=len(self.data.known_shapes), emb_dim=self.head.emb_dim,
                          hidden=self.head.hidden)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return to_jsonable(self)


def _parse_side(obj: dict, path: str) -> SideConfig:
    fields = {f.name for f in dataclasses.fields(SideConfig)}
    _check_keys(obj, fields, path)
    kw = dict(obj)
    if "scales" in kw:
        scales = []
        for i, s in enumerate(kw["scales"]):
            if isinstance(s, dict):
                _check_keys(s, {"dim_divisor", "num_blocks"}, f"{path}.scales[{i}]")
                scales.append(ScaleSpec(int(s["dim_divisor"]), int(s["num_blocks"])))
            elif isinstance(s, (list, tuple)) and len(s) == 2:
                scales.append(ScaleSpec(int(s[0]), int(s[1])))
            else:
                raise ConfigurationError(f"{path}.scales[{i}]: expected [dim_divisor, num_blocks]")
        kw["scales"] = tuple(scales)
    if "sim_scales" in kw:
        kw["sim_scales"] = frozenset(int(v) for v in kw["sim_scales"])
    if kw.get("tap_assignment") is not None:
        kw["tap_assignment"] = tuple(int(v) for v in kw["tap_assignment"])
    return SideConfig(**kw)


def _check_keys(obj, allowed: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a JSON object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigurationError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")


def _parse_section(cls, obj, path: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    _check_keys(obj, fields, path)
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


_SECTIONS = {
    "backbone": BackboneConfig, "optimizer": OptimizerConfig, "data": DataConfig,
    "loss": LossConfig, "head": HeadSection, "tracking": TrackingConfig,
}


def config_from_dict(obj: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config; sections present in ``obj`` override ``base`` field by field."""
    base = base or ExperimentConfig()
    _check_keys(obj, {f.name for f in dataclasses.fields(ExperimentConfig)}, "")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in obj:
            merged = {**to_jsonable(getattr(base, name)), **obj[name]} if isinstance(obj[name], dict) else obj[name]
            _check_keys(obj[name], {f.name for f in dataclasses.fields(cls)}, name)
            kw[name] = _parse_section(cls, merged, name)
    if "side" in obj:
        _check_keys(obj["side"], {f.name for f in dataclasses.fields(SideConfig)}, "side")
        kw["side"] = _parse_side({**to_jsonable(base.side), **obj["side"]}, "side")
    for key in ("strategy", "seed"):
        if key in obj:
            kw[key] = obj[key]
    if "seed" in kw and (isinstance(kw["seed"], bool) or not isinstance(kw["seed"], int)):
        raise ConfigurationError("seed must be an integer")
    return dataclasses.replace(base, **kw)


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Read a JSON config. ``None`` gives the desk defaults; a bare name such as
    ``desk`` or ``reference`` selects a bundled config."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.exists() and str(path) in builtin_configs():
        text = resources.files("effowt.configs").joinpath(f"{path}.json").read_text(encoding="utf-8")
    else:
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(obj)


def builtin_configs() -> list[str]:
    return sorted(f.name[:-5] for f in resources.files("effowt.configs").iterdir() if f.name.endswith(".json"))


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (frozenset, set)):
        return sorted(to_jsonable(v) for v in obj)
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def dumps_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"

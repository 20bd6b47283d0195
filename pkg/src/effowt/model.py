"""Backbone + side network + heads under the ``backbone.*`` / ``side.*`` /
``head.*`` namespaces, and the fine-tuning strategies that decide which of
them train."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Module, Tensor, ops
from .backbone import BackboneConfig, ConfigurationError, ViTBackbone, backbone_forward
from .heads import HeadOutputs, TrackHead, reid_contrastive_loss
from .side import SideConfig, SideNetwork, init_by_structural_pruning


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 2
    emb_dim: int = 64
    hidden: int = 128


@dataclass(frozen=True)
class StrategySpec:
    name: str
    trainable: Callable[[str], bool]
    uses_sim: bool = False

    def trainable_names(self, names) -> list[str]:
        return [n for n in names if self.trainable(n)]


def _under(*prefixes: str) -> Callable[[str], bool]:
    return lambda name: any(name.startswith(p + ".") for p in prefixes)


STRATEGIES: dict[str, StrategySpec] = {
    "full": StrategySpec("full", lambda name: True),
    "zero_shot": StrategySpec("zero_shot", _under("head")),
    "side": StrategySpec("side", _under("side", "head")),
    "side_sim": StrategySpec("side_sim", _under("side", "head"), uses_sim=True),
}


def get_strategy(name: str) -> StrategySpec:
    try:
        return STRATEGIES[name]
    except KeyError:
        raise ConfigurationError(f"unknown strategy {name!r}; expected one of {sorted(STRATEGIES)}") from None


def side_config_for(strategy: StrategySpec, side_cfg: SideConfig) -> SideConfig:
    """side_sim swaps in SIM at the widest scale unless the config already names scales."""
    if strategy.uses_sim and not side_cfg.sim_scales:
        return side_cfg.with_sim()
    return side_cfg


class EffOWTModel(Module):
    def __init__(self, backbone_cfg: BackboneConfig, side_cfg: SideConfig, head_cfg: HeadConfig,
                 strategy: str = "side", rng=None, prune_init: bool = True):
        super().__init__()
        self.strategy = get_strategy(strategy)
        self.backbone_cfg = backbone_cfg
        self.side_cfg = side_config_for(self.strategy, side_cfg)
        self.head_cfg = head_cfg
        self.backbone = ViTBackbone(backbone_cfg, rng)
        self.side = SideNetwork(backbone_cfg, self.side_cfg, rng)
        self.head = TrackHead(self.side.fusion.common_dim, head_cfg.num_classes,
                              head_cfg.emb_dim, head_cfg.hidden, rng)
        self.assign_names()
        if prune_init and rng is not None:
            init_by_structural_pruning(self.backbone, self.side, backbone_cfg, self.side_cfg)
        self.apply_strategy()

    def apply_strategy(self) -> None:
        for name, p in self.named_parameters():
            p.trainable = self.strategy.trainable(name)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def features(self, images: Tensor) -> Tensor:
        taps = backbone_forward(images, self.backbone, self.strategy.name)
        return self.side(taps)

    def forward(self, images: Tensor, boxes: list[np.ndarray]) -> HeadOutputs:
        return self.head(self.features(images), boxes, self.backbone_cfg.image_size)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: np.asarray(p.data) for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        bad = [f"{n}: checkpoint {tuple(state[n].shape)} vs model {params[n].shape}"
               for n in params if n in state and tuple(state[n].shape) != params[n].shape]
        if missing or extra or bad:
            parts = []
            if bad:
                parts.append("shape mismatch " + "; ".join(bad[:5]) + (" ..." if len(bad) > 5 else ""))
            if missing:
                parts.append(f"missing {missing[:5]}")
            if extra:
                parts.append(f"unexpected {extra[:5]}")
            raise ConfigurationError("checkpoint does not fit the model: " + ", ".join(parts))
        for n, p in params.items():
            p.data = np.array(state[n], dtype=np.float64)


def count_by_namespace(model: Module) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        ns = name.split(".", 1)[0]
        out[ns] = out.get(ns, 0) + p.size
    return out


def classification_loss(outputs: HeadOutputs, labels) -> Tensor:
    return ops.cross_entropy(outputs.class_logits, np.asarray(labels, dtype=np.int64))


@dataclass(frozen=True)
class LossConfig:
    cls_weight: float = 1.0
    reid_weight: float = 1.0
    temperature: float = 0.07


def compute_loss(model: EffOWTModel, images: np.ndarray, boxes: list[np.ndarray], labels, ids,
                 loss_cfg: LossConfig = LossConfig()) -> Tensor:
    """Weighted classification + ReID loss for one batch of regions."""
    out = model(Tensor(images), boxes)
    loss = classification_loss(out, labels) * loss_cfg.cls_weight
    if loss_cfg.reid_weight:
        loss = loss + reid_contrastive_loss(out.embeddings, ids, loss_cfg.temperature) * loss_cfg.reid_weight
    return loss

from __future__ import annotations

from ..backbone import layer_param_count
from .config import SideConfig


def scale_layer_params(cfg: SideConfig, d_backbone: int) -> list[int]:
    """Transformer-layer parameters held by each scale (dense MLP layers)."""
    out = []
    for sc in cfg.scales:
        d = d_backbone // sc.dim_divisor
        per_layer = sum(layer_param_count(d, cfg.mlp_ratio).values())
        out.append(sc.num_blocks * cfg.N * per_layer)
    return out


def count_scale_proportions(cfg: SideConfig, d_backbone: int) -> dict[int, float]:
    """Fraction of side transformer parameters per scale, keyed by dim divisor."""
    counts = scale_layer_params(cfg, d_backbone)
    total = sum(counts)
    return {sc.dim_divisor: c / total for sc, c in zip(cfg.scales, counts)}

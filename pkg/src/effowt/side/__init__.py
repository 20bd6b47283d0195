"""Trainable side network that reads the frozen backbone through gated taps."""

from .config import DEFAULT_SCALES, ScaleSpec, SideConfig
from .network import (
    ConvUnit,
    MultiScaleFusion,
    SideBlock,
    SideConnection,
    SideNetwork,
    fuse_for_head,
    gated_fuse,
    hybrid_block_forward,
    multiscale_forward,
)
from .proportions import count_scale_proportions, scale_layer_params
from .pruning import (
    init_by_structural_pruning,
    prune_matrix,
    prune_transformer_layer,
    structural_pruning_weights,
    top_k,
)

__all__ = [
    "DEFAULT_SCALES", "ConvUnit", "MultiScaleFusion", "ScaleSpec", "SideBlock", "SideConfig",
    "SideConnection", "SideNetwork", "count_scale_proportions", "fuse_for_head", "gated_fuse",
    "hybrid_block_forward", "init_by_structural_pruning", "multiscale_forward", "prune_matrix",
    "prune_transformer_layer", "scale_layer_params", "structural_pruning_weights", "top_k",
]

"""Side network: gated taps into the frozen backbone, hybrid CNN + transformer
blocks at shrinking widths and resolutions, and a weighted multi-scale fusion."""

from __future__ import annotations

import numpy as np

from ..autograd import Conv2d, GroupNorm, Linear, Module, ModuleList, Parameter, Tensor, ops
from ..autograd.nn import constant
from ..backbone import BackboneConfig, BackboneTaps, TransformerLayer
from ..sim import SimMixer
from .config import SideConfig


class SideConnection(Module):
    """Blends a pooled, projected backbone tap into the side feature.

    The mixing weight is ``sigmoid(gate)``, so the result is always a convex
    combination of the two inputs.
    """

    def __init__(self, d_backbone: int, d_side: int, pool: int, rng=None):
        super().__init__()
        self.proj = Linear(d_backbone, d_side, rng)
        self.pool = int(pool)
        self.gate = Parameter(constant(rng, (1,), 0.0))

    def mix_weight(self) -> float:
        return float(ops._sigmoid_np(np.asarray(self.gate.data))[0])

    def project_tap(self, tap: Tensor, grid: int) -> Tensor:
        g = ops.square_side(tap.shape[1])
        x = ops.tokens_to_grid(tap, g, g)
        if self.pool > 1:
            x = ops.avg_pool2d(x, self.pool)
        if x.shape[2] != grid:
            raise ops.ShapeError("gated_fuse", f"pooled tap grid {x.shape[2]} != side grid {grid}")
        h = x.shape[2]
        return ops.tokens_to_grid(self.proj(ops.grid_to_tokens(x)), h, h)

    def forward(self, tap: Tensor, f_side: Tensor) -> Tensor:
        return gated_fuse(tap, f_side, self)


def gated_fuse(tap: Tensor, f_side: Tensor, conn: SideConnection) -> Tensor:
    """sigmoid(g) * proj(pool(tap)) + (1 - sigmoid(g)) * f_side.

    ``tap`` is backbone tokens [B, T, D_b]; ``f_side`` is [B, D_s, h, w].
    """
    if f_side.ndim != 4:
        raise ops.ShapeError("gated_fuse", f"side feature must be [B, D, H, W], got {f_side.shape}")
    fb = conn.project_tap(tap, f_side.shape[2])
    if fb.shape != f_side.shape:
        raise ops.ShapeError("gated_fuse", f"projected tap {fb.shape} != side feature {f_side.shape}")
    s = ops.reshape(ops.sigmoid(conn.gate), (1, 1, 1, 1))
    return s * fb + (1.0 - s) * f_side


class ConvUnit(Module):
    """3x3 same-padding conv, group norm, GELU."""

    def __init__(self, channels: int, rng=None, groups: int = 8):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm = GroupNorm(groups, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.gelu(self.norm(self.conv(x)))


class SideBlock(Module):
    def __init__(self, dim: int, heads: int, n_layers: int, grid: int, rng=None,
                 mlp_ratio: int = 4, use_sim: bool = False, gn_groups: int = 8):
        super().__init__()
        self.dim, self.grid, self.use_sim = dim, grid, use_sim
        self.pre_cnn = ConvUnit(dim, rng, gn_groups)
        self.layers = ModuleList(
            TransformerLayer(dim, heads, mlp_ratio, rng,
                             mixer=SimMixer(dim, grid, rng) if use_sim else None)
            for _ in range(n_layers))
        self.post_cnn = ConvUnit(dim, rng, gn_groups)


def hybrid_block_forward(f_prev: Tensor, tap: Tensor, block: SideBlock,
                         conn: SideConnection) -> Tensor:
    fused = conn(tap, f_prev)
    f_local = block.pre_cnn(fused)
    b, d, h, w = f_local.shape
    if h != w:
        raise ops.ShapeError("hybrid_block", f"side grid must be square, got {h}x{w}")
    x = ops.grid_to_tokens(f_local)
    for layer in block.layers:
        x = layer(x, h)
    f_global = ops.tokens_to_grid(x, h, w)
    return block.post_cnn(f_local + f_global)


class MultiScaleFusion(Module):
    """Upsample every block output to the finest grid, project to a common
    width and blend with softmax-normalized scale weights."""

    def __init__(self, dims: list[int], common_dim: int, rng=None):
        super().__init__()
        self.common_dim = common_dim
        self.projections = ModuleList(Linear(d, common_dim, rng) for d in dims)
        self.scale_weights = Parameter(constant(rng, (len(dims),), 0.0))

    def weights(self) -> Tensor:
        return ops.softmax(self.scale_weights, axis=0)

    def forward(self, outputs: list[Tensor]) -> Tensor:
        return fuse_for_head(outputs, self)


def fuse_for_head(outputs: list[Tensor], fusion: MultiScaleFusion) -> Tensor:
    if not outputs:
        raise ValueError("fuse_for_head needs at least one block output")
    if len(outputs) != len(fusion.projections):
        raise ops.ShapeError("fuse_for_head", f"{len(outputs)} maps for {len(fusion.projections)} projections")
    size = max(o.shape[2] for o in outputs)
    wts = fusion.weights()
    total = None
    for k, (o, proj) in enumerate(zip(outputs, fusion.projections)):
        if o.shape[2] != size:
            o = ops.upsample_nearest(o, (size, size))
        m = ops.tokens_to_grid(proj(ops.grid_to_tokens(o)), size, size)
        term = m * wts[k]
        total = term if total is None else total + term
    return total


class SideNetwork(Module):
    def __init__(self, backbone_cfg: BackboneConfig, cfg: SideConfig, rng=None):
        super().__init__()
        cfg.validate(backbone_cfg)
        self.backbone_cfg, self.cfg = backbone_cfg, cfg
        grids = cfg.grids(backbone_cfg.grid)
        d_b = backbone_cfg.dim
        self.taps = cfg.taps(backbone_cfg.depth)
        self.block_grids: list[int] = []
        self.block_dims: list[int] = []
        self.stem = Linear(d_b, d_b // cfg.scales[0].dim_divisor, rng)
        self.connections = ModuleList()
        self.blocks = ModuleList()
        self.transitions = ModuleList()
        for si, (sc, g) in enumerate(zip(cfg.scales, grids)):
            d = d_b // sc.dim_divisor
            if si:
                prev = d_b // cfg.scales[si - 1].dim_divisor
                self.transitions.append(Conv2d(prev, d, 3, rng, stride=2, padding=1))
            for _ in range(sc.num_blocks):
                self.connections.append(SideConnection(d_b, d, backbone_cfg.grid // g, rng))
                self.blocks.append(SideBlock(
                    d, cfg.side_heads(backbone_cfg, sc.dim_divisor), cfg.N, g, rng,
                    cfg.mlp_ratio, sc.dim_divisor in cfg.sim_scales, cfg.gn_groups))
                self.block_grids.append(g)
                self.block_dims.append(d)
        common = cfg.common_dim or self.block_dims[0]
        self.fusion = MultiScaleFusion(self.block_dims, common, rng)

    def forward(self, taps: BackboneTaps) -> Tensor:
        return self.fusion(multiscale_forward(taps, self))


def multiscale_forward(taps: BackboneTaps, side: SideNetwork) -> list[Tensor]:
    """Every block's output, in scale order."""
    g = taps.grid
    f = ops.tokens_to_grid(side.stem(taps.embedding), g, g)
    outputs = []
    first_of_scale = set()
    k = 0
    for sc in side.cfg.scales:
        first_of_scale.add(k)
        k += sc.num_blocks
    t = 0
    for k, (block, conn) in enumerate(zip(side.blocks, side.connections)):
        if k in first_of_scale and k:
            f = side.transitions[t](f)
            t += 1
        f = hybrid_block_forward(f, taps.layers[side.taps[k]], block, conn)
        outputs.append(f)
    return outputs

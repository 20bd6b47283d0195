"""Frozen ViT-style encoder that exposes every layer's output as a tap."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Linear, LayerNorm, Module, ModuleList, Parameter, Tensor, ops
from .autograd.nn import Conv2d, trunc_normal


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 128
    depth: int = 8
    heads: int = 4
    mlp_ratio: int = 4
    attn_chunk: int | None = None

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.mlp_ratio < 1:
            raise ConfigurationError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


# Parameter-accounting scale (never trained) and the desk training scale.
REFERENCE_BACKBONE = BackboneConfig(image_size=256, patch=16, dim=1024, depth=24, heads=16)
DESK_BACKBONE = BackboneConfig(image_size=64, patch=8, dim=128, depth=8, heads=4)


@dataclass
class BackboneTaps:
    embedding: Tensor
    layers: list[Tensor] = field(default_factory=list)
    grid: int = 0

    def __len__(self):
        return len(self.layers)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng=None, chunk: int | None = None):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.chunk = dim, heads, chunk
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        hd = d // self.heads
        qkv = ops.permute(ops.reshape(self.qkv(x), (b, t, 3, self.heads, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        kt = ops.swapaxes(k, -1, -2)
        scale = 1.0 / np.sqrt(hd)
        step = self.chunk or t
        outs = []
        for s in range(0, t, step):
            qc = q[:, :, s:s + step] if step < t else q
            attn = ops.softmax(ops.matmul(qc, kt) * scale, axis=-1)
            outs.append(ops.matmul(attn, v))
        o = outs[0] if len(outs) == 1 else ops.concat(outs, axis=2)
        o = ops.reshape(ops.permute(o, (0, 2, 1, 3)), (b, t, d))
        return self.proj(o)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng=None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + mixer(LN(x)).

    ``mixer`` defaults to the channel MLP; a token mixer operating on the grid
    (see :mod:`effowt.sim`) can be swapped in and receives ``grid``.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, rng=None,
                 mixer: Module | None = None, chunk: int | None = None):
        super().__init__()
        self.ln1 = LayerNorm(dim, rng)
        self.attn = Attention(dim, heads, rng, chunk=chunk)
        self.ln2 = LayerNorm(dim, rng)
        if mixer is None:
            self.mlp = MLP(dim, dim * mlp_ratio, rng)
        else:
            self.mlp = mixer
        self.token_mixer = mixer is not None

    def forward(self, x: Tensor, grid: int | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x))
        h = self.ln2(x)
        h = self.mlp(h, grid) if self.token_mixer else self.mlp(h)
        return x + h


class ViTBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = Conv2d(3, cfg.dim, cfg.patch, rng, stride=cfg.patch, std=0.02)
        self.pos_embed = Parameter(trunc_normal(rng, (1, cfg.tokens, cfg.dim), 0.02))
        self.layers = ModuleList(
            TransformerLayer(cfg.dim, cfg.heads, cfg.mlp_ratio, rng, chunk=cfg.attn_chunk)
            for _ in range(cfg.depth)
        )

    def forward(self, images: Tensor) -> BackboneTaps:
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ops.ShapeError(
                "backbone", f"expected [B, 3, {cfg.image_size}, {cfg.image_size}], got {images.shape}")
        x = ops.grid_to_tokens(self.patch_embed(images)) + self.pos_embed
        taps = BackboneTaps(embedding=x, grid=cfg.grid)
        for layer in self.layers:
            x = layer(x)
            taps.layers.append(x)
        return taps


FROZEN_BACKBONE_STRATEGIES = {"zero_shot", "side", "side_sim"}


def backbone_forward(images: Tensor, backbone: ViTBackbone, strategy: str | None = None) -> BackboneTaps:
    """Run the encoder, refusing to do so if a frozen strategy left weights trainable."""
    if strategy in FROZEN_BACKBONE_STRATEGIES:
        live = [p.name for p in backbone.parameters() if p.trainable]
        if live:
            raise ConfigurationError(
                f"strategy {strategy!r} requires a frozen backbone; trainable: {live[:3]}"
                + (" ..." if len(live) > 3 else ""))
    return backbone(images)


def layer_param_count(dim: int, mlp_ratio: int = 4) -> dict[str, int]:
    """Exact parameter counts of one pre-norm transformer layer by component."""
    hidden = dim * mlp_ratio
    mha = (3 * dim * dim + 3 * dim) + (dim * dim + dim)
    mlp = (dim * hidden + hidden) + (hidden * dim + dim)
    ln = 2 * (2 * dim)
    return {"mha": mha, "mlp": mlp, "ln": ln}


def layer_param_split(cfg: BackboneConfig) -> dict[str, float]:
    """Fractions of one layer's parameters held by MHA, MLP and the LayerNorms."""
    counts = layer_param_count(cfg.dim, cfg.mlp_ratio)
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


def backbone_param_formula(cfg: BackboneConfig) -> int:
    """Leading-order size: 12 * D^2 per layer (mlp_ratio 4)."""
    return cfg.depth * (4 + 2 * cfg.mlp_ratio) * cfg.dim * cfg.dim

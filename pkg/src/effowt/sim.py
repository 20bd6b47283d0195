"""Sparse interaction module: a token-mixing replacement for the dense MLP.

Each token only exchanges information with tokens on its row, its column and
the two cyclic diagonals through it. The four path outputs and the input are
blended with softmax-normalized weights and passed through a pointwise
channel projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Linear, Module, Parameter, Tensor, ops
from .autograd.nn import constant, trunc_normal

PATHS = ("row", "col", "diag", "anti", "identity")


def _mix_init(rng, w: int, std: float) -> np.ndarray:
    if rng is None:
        return np.broadcast_to(np.float64(0.0), (w, w))
    return np.eye(w) + trunc_normal(rng, (w, w), std)


class SimLayer(Module):
    def __init__(self, dim: int, grid: int, rng=None, std: float = 0.02):
        super().__init__()
        self.dim, self.grid = dim, grid
        self.row_mix = Parameter(_mix_init(rng, grid, std))
        self.col_mix = Parameter(_mix_init(rng, grid, std))
        self.diag_mix = Parameter(_mix_init(rng, grid, std))
        self.anti_mix = Parameter(_mix_init(rng, grid, std))
        self.channel_proj = Linear(dim, dim, rng)
        self.fusion_logits = Parameter(constant(rng, (5,), 0.0))

    def forward(self, x: Tensor) -> Tensor:
        return sim_forward(x, self)

    def fusion_weights(self) -> Tensor:
        return ops.softmax(self.fusion_logits, axis=0)


def sim_forward(x: Tensor, layer: SimLayer) -> Tensor:
    """[B, D, H, W] -> [B, D, H, W]. Square grids only."""
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ops.ShapeError("sim_forward", f"expected a square [B, D, H, W] grid, got {x.shape}")
    mixed = ops.line_mix(x, layer.row_mix, layer.col_mix, layer.diag_mix, layer.anti_mix,
                         layer.fusion_weights())
    tokens = ops.permute(mixed, (0, 2, 3, 1))
    return ops.permute(layer.channel_proj(tokens), (0, 3, 1, 2))


def _shift(x: Tensor, sign: int) -> Tensor:
    w = x.shape[-1]
    return ops.gather(x, ops._line_shift_index(w, sign), axis=3)


def sim_forward_unfused(x: Tensor, layer: SimLayer) -> Tensor:
    """Same computation as :func:`sim_forward` composed from basic ops.

    Kept as an independent route for cross-checking the fused kernel.
    """
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ops.ShapeError("sim_forward", f"expected a square [B, D, H, W] grid, got {x.shape}")
    w = layer.fusion_weights()
    p_row = ops.linear(x, layer.row_mix)
    p_col = ops.swapaxes(ops.linear(ops.swapaxes(x, 2, 3), layer.col_mix), 2, 3)
    s_d = _shift(x, +1)
    p_diag = _shift(ops.swapaxes(ops.linear(ops.swapaxes(s_d, 2, 3), layer.diag_mix), 2, 3), -1)
    s_a = _shift(x, -1)
    p_anti = _shift(ops.swapaxes(ops.linear(ops.swapaxes(s_a, 2, 3), layer.anti_mix), 2, 3), +1)
    comb = None
    for k, p in enumerate((p_row, p_col, p_diag, p_anti, x)):
        term = p * w[k]
        comb = term if comb is None else comb + term
    tokens = ops.permute(comb, (0, 2, 3, 1))
    return ops.permute(layer.channel_proj(tokens), (0, 3, 1, 2))


class SimMixer(Module):
    """Adapter so a SimLayer can stand in for a transformer layer's MLP."""

    def __init__(self, dim: int, grid: int, rng=None):
        super().__init__()
        self.sim = SimLayer(dim, grid, rng)

    def forward(self, tokens: Tensor, grid: int | None = None) -> Tensor:
        g = grid if grid is not None else ops.square_side(tokens.shape[1])
        return ops.grid_to_tokens(self.sim(ops.tokens_to_grid(tokens, g, g)))


class DenseMixBaseline(Module):
    """Every token pair gets its own weight, followed by a channel projection."""

    def __init__(self, dim: int, grid: int, rng=None, std: float = 0.02):
        super().__init__()
        n = grid * grid
        self.mix = Parameter(_mix_init(rng, n, std))
        self.channel_proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, d, h, w = x.shape
        flat = ops.reshape(x, (b, d, h * w))
        mixed = ops.reshape(ops.linear(flat, self.mix), (b, d, h, w))
        tokens = ops.permute(mixed, (0, 2, 3, 1))
        return ops.permute(self.channel_proj(tokens), (0, 3, 1, 2))


# -- parameter arithmetic ---------------------------------------------------------------------

def sim_param_count(dim: int, grid: int, bias: bool = True) -> int:
    """W^2 + H^2 + 2 L_d^2 + D^2 + 5 (+ D bias) for a square grid."""
    return 4 * grid * grid + dim * dim + 5 + (dim if bias else 0)


def ffn_param_count(dim: int, mlp_ratio: int = 4, bias: bool = True) -> int:
    hidden = dim * mlp_ratio
    return 2 * dim * hidden + ((hidden + dim) if bias else 0)


def dense_mix_param_count(dim: int, grid: int, bias: bool = True) -> int:
    n = grid * grid
    return n * n + dim * dim + (dim if bias else 0)


def sim_supported(dim: int, grid: int) -> bool:
    """SIM is deployed only where line mixing costs no more than the channel map."""
    return grid >= 2 and dim >= 8 and grid <= dim


@dataclass
class SimSavings:
    mlp_before: int
    mlp_after: int
    ratio: float
    dense_mix_before: int
    layers_affected: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.ratio


def sim_param_savings(side_cfg, backbone_dim: int, grid: int) -> SimSavings:
    """Dense-FFN vs SIM parameter totals over the blocks SIM replaces.

    ``grid`` is the backbone token grid side; each scale halves it.
    ``dense_mix_before`` gives the same total against a full token-mixing
    baseline instead of the channel FFN.
    """
    before = after = dense = layers = 0
    g = grid
    for k, sc in enumerate(side_cfg.scales):
        if k:
            g = (g + 1) // 2
        if sc.dim_divisor not in side_cfg.sim_scales:
            continue
        d = backbone_dim // sc.dim_divisor
        n = sc.num_blocks * side_cfg.N
        layers += n
        before += n * ffn_param_count(d, side_cfg.mlp_ratio)
        after += n * sim_param_count(d, g)
        dense += n * dense_mix_param_count(d, g)
    ratio = after / before if before else 1.0
    return SimSavings(before, after if before else 0, ratio, dense, layers)


# -- receptive field ---------------------------------------------------------------------------

def receptive_field(layers: int, h: int, w: int | None = None, dense: bool = False,
                    dim: int = 3, seed: int = 0) -> np.ndarray:
    """Boolean [(H*W), (H*W)] matrix: entry (i, j) is True iff input token i
    reaches output token j through ``layers`` stacked mixers, judged by the
    nonzero pattern of the Jacobian at random generic weights.
    """
    w = h if w is None else w
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if h != w:
        raise ops.ShapeError("receptive_field", f"grid must be square, got {h}x{w}")
    rng = np.random.default_rng(seed)
    stack = []
    for _ in range(layers):
        m = DenseMixBaseline(dim, h) if dense else SimLayer(dim, h)
        for p in m.parameters():
            p.data = rng.standard_normal(p.shape)
            p.requires_grad = False
        stack.append(m)
    n = h * w
    x0 = rng.standard_normal((1, dim, h, w))
    readout = rng.standard_normal(dim)
    influence = np.zeros((n, n), dtype=bool)
    for j in range(n):
        x = Tensor(x0, requires_grad=True)
        y = x
        for m in stack:
            y = m(y)
        jh, jw = divmod(j, w)
        ops.sum(y[0, :, jh, jw] * Tensor(readout)).backward()
        mag = np.abs(x.grad[0]).sum(axis=0).reshape(-1)
        influence[:, j] = mag > 1e-12 * max(mag.max(), 1e-300)
    return influence


def line_union(h: int, w: int, token: int) -> set[int]:
    """Row, column and both cyclic diagonals through ``token`` (flat index)."""
    i0, j0 = divmod(token, w)
    out = set()
    for i in range(h):
        for j in range(w):
            if i == i0 or j == j0 or (j - i - (j0 - i0)) % w == 0 or (i + j - (i0 + j0)) % w == 0:
                out.add(i * w + j)
    return out

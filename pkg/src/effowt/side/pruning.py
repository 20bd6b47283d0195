"""Data-free structural pruning used to initialize side layers from backbone layers.

Importance is the L1 norm of rows (output channels) or columns (input
channels); attention heads are ranked by the Frobenius norm of their q/k/v
rows. Ties go to the lowest index and kept indices stay in ascending order,
so keeping everything reproduces the source weights exactly.
"""

from __future__ import annotations

import numpy as np

from ..backbone import BackboneConfig, ConfigurationError, TransformerLayer


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 < k <= scores.size:
        raise ConfigurationError(f"cannot keep {k} of {scores.size} channels")
    order = np.argsort(-scores, kind="stable")[:k]
    return np.sort(order)


def prune_matrix(w: np.ndarray, k_out: int, k_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keep the top ``k_out`` rows and ``k_in`` columns by L1 norm.

    Returns ``(pruned, rows, cols)``.
    """
    w = np.asarray(w)
    rows = top_k(np.abs(w).sum(axis=1), k_out)
    cols = top_k(np.abs(w).sum(axis=0), k_in)
    return w[np.ix_(rows, cols)].copy(), rows, cols


def _arr(p) -> np.ndarray:
    return np.asarray(p.data)


def layer_selection(layer: TransformerLayer, dim_s: int, heads_s: int, hidden_s: int | None) -> dict:
    """Channel, head and hidden-unit choices for shrinking one backbone layer."""
    qkv_w = _arr(layer.attn.qkv.weight)
    d = qkv_w.shape[1]
    heads = layer.attn.heads
    hd = d // heads
    if dim_s > d or dim_s % heads_s:
        raise ConfigurationError(f"side dim {dim_s} incompatible with {heads_s} heads from dim {d}")
    hd_s = dim_s // heads_s
    if hd_s > hd or heads_s > heads:
        raise ConfigurationError(f"side head layout {heads_s}x{hd_s} exceeds source {heads}x{hd}")

    proj_w = _arr(layer.attn.proj.weight)
    residual_score = np.abs(qkv_w).sum(axis=0) + np.abs(proj_w).sum(axis=1)
    if hidden_s is not None and not layer.token_mixer:
        residual_score = (residual_score + np.abs(_arr(layer.mlp.fc1.weight)).sum(axis=0)
                          + np.abs(_arr(layer.mlp.fc2.weight)).sum(axis=1))
    residual = top_k(residual_score, dim_s)

    q, k, v = qkv_w[:d], qkv_w[d:2 * d], qkv_w[2 * d:]
    per_head = np.array([
        np.sqrt(sum((m[h * hd:(h + 1) * hd] ** 2).sum() for m in (q, k, v))) for h in range(heads)])
    kept_heads = top_k(per_head, heads_s)
    row_l1 = np.abs(q).sum(axis=1) + np.abs(k).sum(axis=1) + np.abs(v).sum(axis=1)
    inner = np.concatenate([h * hd + top_k(row_l1[h * hd:(h + 1) * hd], hd_s) for h in kept_heads])

    out = {"residual": residual, "heads": kept_heads, "inner": inner}
    if hidden_s is not None and not layer.token_mixer:
        out["hidden"] = top_k(np.abs(_arr(layer.mlp.fc1.weight)).sum(axis=1), hidden_s)
    return out


def prune_transformer_layer(layer: TransformerLayer, dim_s: int, heads_s: int,
                            hidden_s: int | None) -> dict[str, np.ndarray]:
    """Pruned weights for a side layer, keyed by parameter path within the layer.

    ``hidden_s=None`` skips the MLP (the side layer uses a token mixer there).
    """
    sel = layer_selection(layer, dim_s, heads_s, hidden_s)
    s, a = sel["residual"], sel["inner"]
    d = layer.attn.qkv.weight.shape[1]
    qkv_rows = np.concatenate([a, a + d, a + 2 * d])
    out = {
        "ln1.weight": _arr(layer.ln1.weight)[s],
        "ln1.bias": _arr(layer.ln1.bias)[s],
        "ln2.weight": _arr(layer.ln2.weight)[s],
        "ln2.bias": _arr(layer.ln2.bias)[s],
        "attn.qkv.weight": _arr(layer.attn.qkv.weight)[np.ix_(qkv_rows, s)],
        "attn.qkv.bias": _arr(layer.attn.qkv.bias)[qkv_rows],
        "attn.proj.weight": _arr(layer.attn.proj.weight)[np.ix_(s, a)],
        "attn.proj.bias": _arr(layer.attn.proj.bias)[s],
    }
    if "hidden" in sel:
        h = sel["hidden"]
        out.update({
            "mlp.fc1.weight": _arr(layer.mlp.fc1.weight)[np.ix_(h, s)],
            "mlp.fc1.bias": _arr(layer.mlp.fc1.bias)[h],
            "mlp.fc2.weight": _arr(layer.mlp.fc2.weight)[np.ix_(s, h)],
            "mlp.fc2.bias": _arr(layer.mlp.fc2.bias)[s],
        })
    return {k: np.array(v, dtype=np.float64) for k, v in out.items()}


def structural_pruning_weights(backbone, backbone_cfg: BackboneConfig, side_cfg) -> dict[str, np.ndarray]:
    """Initial side-layer weights keyed like ``blocks.{b}.layers.{n}.<param>``.

    Side layer j (counting across all blocks) is cut from backbone layer
    ``j * depth // num_side_layers``.
    """
    side_cfg.validate(backbone_cfg)
    sources = side_cfg.init_source_layers(backbone_cfg.depth)
    weights: dict[str, np.ndarray] = {}
    j = 0
    for b, div in enumerate(side_cfg.block_divisors()):
        dim_s = backbone_cfg.dim // div
        heads_s = side_cfg.side_heads(backbone_cfg, div)
        hidden_s = None if div in side_cfg.sim_scales else dim_s * side_cfg.mlp_ratio
        for n in range(side_cfg.N):
            src = backbone.layers[sources[j]]
            for key, w in prune_transformer_layer(src, dim_s, heads_s, hidden_s).items():
                weights[f"blocks.{b}.layers.{n}.{key}"] = w
            j += 1
    return weights


def init_by_structural_pruning(backbone, side, backbone_cfg: BackboneConfig, side_cfg) -> int:
    """Copy pruned backbone weights into ``side`` in place; returns tensors written."""
    weights = structural_pruning_weights(backbone, backbone_cfg, side_cfg)
    params = dict(side.named_parameters())
    for key, w in weights.items():
        p = params.get(key)
        if p is None:
            raise ConfigurationError(f"side network has no parameter {key!r}")
        if p.shape != w.shape:
            raise ConfigurationError(f"{key}: pruned shape {w.shape} != side shape {p.shape}")
        p.data = w.copy()
    return len(weights)

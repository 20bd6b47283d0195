"""Region classification and ReID heads, the contrastive ReID loss, and
appearance-only association."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autograd import Linear, Module, Tensor, ops


@dataclass
class HeadOutputs:
    class_logits: Tensor  # [M, K+1], background is the last column
    embeddings: Tensor    # [M, E], unit norm

    def __len__(self):
        return self.class_logits.shape[0]


def region_pool_matrix(boxes: list[np.ndarray], grid: int, image_size: int) -> np.ndarray:
    """[M, B*grid*grid] averaging weights over the grid cells each box touches.

    ``boxes[b]`` is an [n_b, 4] array of (x, y, w, h) pixel boxes in image b.
    """
    cell = image_size / grid
    rows = []
    n_images = len(boxes)
    for b, bx in enumerate(boxes):
        bx = np.asarray(bx, dtype=np.float64).reshape(-1, 4)
        for x, y, w, h in bx:
            if w <= 0 or h <= 0:
                raise ValueError(f"box ({x}, {y}, {w}, {h}) has non-positive size")
            if x < -1e-9 or y < -1e-9 or x + w > image_size + 1e-9 or y + h > image_size + 1e-9:
                raise ValueError(f"box ({x}, {y}, {w}, {h}) outside the {image_size}px image")
            c0, c1 = int(np.floor(x / cell)), int(np.ceil((x + w) / cell))
            r0, r1 = int(np.floor(y / cell)), int(np.ceil((y + h) / cell))
            c0, r0 = min(c0, grid - 1), min(r0, grid - 1)
            c1, r1 = max(c1, c0 + 1), max(r1, r0 + 1)
            m = np.zeros((n_images, grid, grid))
            m[b, r0:r1, c0:c1] = 1.0
            rows.append(m.reshape(-1) / m.sum())
    if not rows:
        return np.zeros((0, n_images * grid * grid))
    return np.stack(rows)


class TrackHead(Module):
    def __init__(self, in_dim: int, num_classes: int, emb_dim: int = 64, hidden: int = 128, rng=None):
        super().__init__()
        self.num_classes, self.emb_dim = num_classes, emb_dim
        self.cls_fc1 = Linear(in_dim, hidden, rng)
        self.cls_fc2 = Linear(hidden, num_classes + 1, rng)
        self.reid_fc1 = Linear(in_dim, hidden, rng)
        self.reid_fc2 = Linear(hidden, emb_dim, rng)

    def forward(self, fused: Tensor, boxes: list[np.ndarray], image_size: int) -> HeadOutputs:
        return head_forward(fused, boxes, self, image_size)


def head_forward(fused: Tensor, boxes: list[np.ndarray], head: TrackHead, image_size: int) -> HeadOutputs:
    b, c, g, _ = fused.shape
    if len(boxes) != b:
        raise ops.ShapeError("head_forward", f"{len(boxes)} box lists for a batch of {b}")
    pool = region_pool_matrix(boxes, g, image_size)
    if pool.shape[0] == 0:
        return HeadOutputs(Tensor(np.zeros((0, head.num_classes + 1))), Tensor(np.zeros((0, head.emb_dim))))
    flat = ops.reshape(ops.grid_to_tokens(fused), (b * g * g, c))
    feats = ops.matmul(Tensor(pool), flat)
    logits = head.cls_fc2(ops.gelu(head.cls_fc1(feats)))
    emb = ops.l2_normalize(head.reid_fc2(ops.gelu(head.reid_fc1(feats))), axis=-1)
    return HeadOutputs(logits, emb)


def reid_contrastive_loss(embeddings: Tensor, ids, temperature: float = 0.07) -> Tensor:
    """Multi-positive InfoNCE over every embedding in the batch.

    For anchor i the positives are the other embeddings sharing its id and the
    denominator runs over every embedding except i itself. Anchors without a
    positive are skipped. Because the similarity matrix is symmetric, each
    view serves as anchor for the other.
    """
    ids = np.asarray(ids)
    m = ids.shape[0]
    if embeddings.shape[0] != m:
        raise ops.ShapeError("reid_loss", f"{embeddings.shape[0]} embeddings for {m} ids")
    if len(np.unique(ids)) < 2:
        raise ValueError("reid loss needs at least two distinct ids in the batch (no negatives otherwise)")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    same = ids[:, None] == ids[None, :]
    eye = np.eye(m, dtype=bool)
    pos = same & ~eye
    anchors = pos.any(axis=1)
    if not anchors.any():
        raise ValueError("reid loss needs at least one id with two or more views")
    sim = ops.matmul(embeddings, ops.swapaxes(embeddings, 0, 1)) * (1.0 / temperature)
    # Mask self-similarity with a large negative so it leaves the denominator.
    sim = sim + Tensor(np.where(eye, -1e9, 0.0))
    logp = ops.log_softmax(sim, axis=1)
    w = np.where(pos, 1.0, 0.0)
    w[anchors] /= w[anchors].sum(axis=1, keepdims=True)
    per_anchor = ops.sum(logp * Tensor(w), axis=1)
    return -ops.sum(per_anchor) * (1.0 / float(anchors.sum()))


def uniform_reid_loss(num_embeddings: int) -> float:
    """Closed form of the loss when every similarity is equal: ln(M - 1)."""
    return float(np.log(num_embeddings - 1))


def associate(prev_emb: np.ndarray, det_emb: np.ndarray, sim_threshold: float) -> dict[int, int]:
    """Optimal detection -> previous-track assignment on cosine similarity.

    Returns {detection index: previous index}; pairs below the threshold are
    never matched.
    """
    if not -1.0 < sim_threshold < 1.0:
        raise ValueError(f"sim_threshold must lie in (-1, 1), got {sim_threshold}")
    prev_emb = np.asarray(prev_emb, dtype=np.float64)
    det_emb = np.asarray(det_emb, dtype=np.float64)
    if prev_emb.size == 0 or det_emb.size == 0:
        return {}
    sim = det_emb @ prev_emb.T
    return assign_by_similarity(sim, sim_threshold)


def assign_by_similarity(sim: np.ndarray, sim_threshold: float) -> dict[int, int]:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.size == 0:
        return {}
    valid = sim >= sim_threshold
    # Invalid pairs get a penalty larger than any achievable gain, so they are
    # only chosen when nothing else is left and are then dropped.
    penalty = 4.0 * (min(sim.shape) + 1)
    cost = np.where(valid, -sim, penalty)
    rows, cols = linear_sum_assignment(cost)
    return {int(r): int(c) for r, c in zip(rows, cols) if valid[r, c]}


class Tracker:
    """Per-video id allocation. Each track keeps the embedding it was last seen with."""

    def __init__(self, sim_threshold: float = 0.5, momentum: float = 0.0):
        if not -1.0 < sim_threshold < 1.0:
            raise ValueError(f"sim_threshold must lie in (-1, 1), got {sim_threshold}")
        self.sim_threshold = sim_threshold
        self.momentum = momentum
        self.ids: list[int] = []
        self.gallery: list[np.ndarray] = []
        self.next_id = 0

    def step(self, det_emb: np.ndarray) -> list[int]:
        det_emb = np.asarray(det_emb, dtype=np.float64)
        n = det_emb.shape[0] if det_emb.ndim == 2 else 0
        if n == 0:
            return []
        match = {}
        if self.gallery:
            match = assign_by_similarity(det_emb @ np.stack(self.gallery).T, self.sim_threshold)
        out = []
        for d in range(n):
            if d in match:
                t = match[d]
                e = self.momentum * self.gallery[t] + (1.0 - self.momentum) * det_emb[d]
                self.gallery[t] = e / max(np.linalg.norm(e), 1e-12)
                out.append(self.ids[t])
            else:
                self.ids.append(self.next_id)
                self.gallery.append(det_emb[d].copy())
                out.append(self.next_id)
                self.next_id += 1
        return out

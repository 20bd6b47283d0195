from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [n, 4] and [m, 4] arrays of (x, y, w, h) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def match_frame(gt_boxes, pred_boxes, alpha: float, ious: np.ndarray | None = None) -> list[tuple[int, int]]:
    """One-to-one (gt, pred) index pairs with IoU >= alpha.

    The matching has the largest possible number of pairs and, among those,
    the largest total IoU.
    """
    if ious is None:
        ious = iou_matrix(gt_boxes, pred_boxes)
    if ious.size == 0:
        return []
    valid = ious >= alpha
    if not valid.any():
        return []
    # A match is worth more than any total IoU, so cardinality comes first.
    bonus = float(min(ious.shape) + 1)
    weight = np.where(valid, bonus + ious, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return sorted((int(r), int(c)) for r, c in zip(rows, cols) if valid[r, c])

"""Open-world tracking accuracy: detection recall and HOTA-style association
accuracy per localization threshold, combined by geometric mean."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .matching import iou_matrix, match_frame
from .records import TrackSet

SPLITS = ("known", "unknown", "all")


class OwtaError(ValueError):
    pass


def default_alphas() -> list[float]:
    return [round(0.05 * k, 2) for k in range(1, 20)]


def parse_alphas(spec: str | None) -> list[float]:
    """``default``, ``start:stop:step`` (inclusive stop) or a comma list."""
    if spec is None or spec.strip() in ("", "default"):
        return default_alphas()
    spec = spec.strip()
    try:
        if ":" in spec:
            start, stop, step = (float(v) for v in spec.split(":"))
            if step <= 0:
                raise OwtaError(f"alpha step must be positive in {spec!r}")
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            alphas = [round(start + k * step, 10) for k in range(n)]
        else:
            alphas = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError as exc:
        if isinstance(exc, OwtaError):
            raise
        raise OwtaError(f"cannot parse alphas {spec!r}") from exc
    validate_alphas(alphas)
    return alphas


def validate_alphas(alphas) -> None:
    if not alphas:
        raise OwtaError("at least one alpha is required")
    if any(not 0.0 < a < 1.0 for a in alphas):
        raise OwtaError(f"alphas must lie in (0, 1), got {alphas}")
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise OwtaError(f"alphas must be strictly increasing, got {alphas}")


@dataclass
class OwtaConfig:
    alphas: list[float] = field(default_factory=default_alphas)
    known_classes: frozenset[str] = frozenset()
    eval_split: str = "all"
    # HOTA reading: a predicted track's frames that match nothing still count
    # against every gt it was paired with. False keeps only matched conflicts.
    count_unmatched_fpa: bool = True

    def __post_init__(self):
        self.alphas = [float(a) for a in self.alphas]
        validate_alphas(self.alphas)
        self.known_classes = frozenset(self.known_classes)
        if self.eval_split not in SPLITS:
            raise OwtaError(f"eval_split must be one of {SPLITS}, got {self.eval_split!r}")


@dataclass
class AlphaResult:
    alpha: float
    owta: float
    det_re: float
    ass_acc: float
    tp: int
    fn: int
    fp: int


@dataclass
class OwtaResult:
    owta: float
    det_re: float
    ass_acc: float
    split: str
    num_gt: int
    per_alpha: list[AlphaResult]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def split_gt(gt: TrackSet, known_classes, split: str) -> TrackSet:
    known = frozenset(known_classes)
    if split == "all":
        return gt.filter(lambda r: True)
    if split == "known":
        return gt.filter(lambda r: r.cls in known)
    if split == "unknown":
        return gt.filter(lambda r: r.cls not in known)
    raise OwtaError(f"unknown split {split!r}")


@dataclass
class _Frame:
    gt_ids: list
    pred_ids: list
    ious: np.ndarray


def _frames(gt: TrackSet, pred: TrackSet, annotated: set) -> dict[str, list[_Frame]]:
    g, p = gt.grouped(), pred.grouped()
    out: dict[str, list[_Frame]] = {}
    for video in sorted({v for v, _ in annotated}):
        frames = []
        for f in sorted(fr for v, fr in annotated if v == video):
            gr = g.get(video, {}).get(f, [])
            pr = p.get(video, {}).get(f, [])
            frames.append(_Frame([r.track_id for r in gr], [r.track_id for r in pr],
                                 iou_matrix([r.bbox for r in gr], [r.bbox for r in pr])))
        out[video] = frames
    return out


def compute_owta(gt: TrackSet, pred: TrackSet, cfg: OwtaConfig) -> OwtaResult:
    """Frames absent from ``gt`` (before the split is applied) are ignored.

    Track ids are local to a video. Predictions are class-agnostic.
    """
    annotated = gt.frames()
    gt_split = split_gt(gt, cfg.known_classes, cfg.eval_split)
    if len(gt_split) == 0:
        raise OwtaError(f"no ground-truth boxes in the {cfg.eval_split!r} split; detection recall is undefined")
    videos = _frames(gt_split, pred, annotated)
    rows = [_evaluate_alpha(videos, a, cfg.count_unmatched_fpa) for a in cfg.alphas]
    return OwtaResult(
        owta=float(np.mean([r.owta for r in rows])),
        det_re=float(np.mean([r.det_re for r in rows])),
        ass_acc=float(np.mean([r.ass_acc for r in rows])),
        split=cfg.eval_split,
        num_gt=len(gt_split),
        per_alpha=rows,
    )


def _evaluate_alpha(videos: dict[str, list[_Frame]], alpha: float, count_unmatched_fpa: bool) -> AlphaResult:
    tp = fn = fp = 0
    assoc_sum = 0.0
    for frames in videos.values():
        gt_index = {t: i for i, t in enumerate(sorted({t for fr in frames for t in fr.gt_ids}))}
        pr_index = {t: i for i, t in enumerate(sorted({t for fr in frames for t in fr.pred_ids}))}
        ng, npr = len(gt_index), len(pr_index)
        pair = np.zeros((ng, npr))
        gt_count = np.zeros(ng)
        pr_count = np.zeros(npr)
        pr_matched = np.zeros(npr)
        for fr in frames:
            gi = [gt_index[t] for t in fr.gt_ids]
            pi = [pr_index[t] for t in fr.pred_ids]
            np.add.at(gt_count, gi, 1)
            np.add.at(pr_count, pi, 1)
            matches = match_frame(None, None, alpha, fr.ious)
            for r, c in matches:
                pair[gi[r], pi[c]] += 1
                pr_matched[pi[c]] += 1
            tp += len(matches)
            fn += len(gi) - len(matches)
            fp += len(pi) - len(matches)
        if not pair.any():
            continue
        fna = gt_count[:, None] - pair
        fpa = (pr_count if count_unmatched_fpa else pr_matched)[None, :] - pair
        score = np.where(pair > 0, pair / np.where(pair > 0, pair + fna + fpa, 1.0), 0.0)
        assoc_sum += float((pair * score).sum())
    det_re = tp / (tp + fn) if tp + fn else 0.0
    ass_acc = assoc_sum / tp if tp else 0.0
    return AlphaResult(alpha, float(np.sqrt(det_re * ass_acc)), float(det_re), float(ass_acc), tp, fn, fp)

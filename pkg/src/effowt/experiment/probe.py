from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..checkpoint import atomic_write_text
from ..sim import line_union, receptive_field
from .data import write_ppm


@dataclass
class ProbeResult:
    grid: list[int]
    layers: int
    dense: bool
    tokens: int
    min_coverage: int
    max_coverage: int
    mean_fraction: float
    full_coverage: bool
    matches_line_union: bool | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def parse_grid(spec: str) -> tuple[int, int]:
    parts = str(spec).lower().split("x")
    try:
        h, w = (int(parts[0]), int(parts[-1])) if len(parts) in (1, 2) else (None, None)
    except ValueError:
        h = w = None
    if h is None or h < 1 or w < 1:
        raise ValueError(f"grid must look like 8x8, got {spec!r}")
    return h, w


def mask_mosaic(influence: np.ndarray, h: int, w: int) -> np.ndarray:
    """Tile every token's influence mask into an (h*h+h-1) x (w*w+w-1) image with 1px gutters."""
    n = h * w
    out = np.full((h * h + h - 1, w * w + w - 1), 96, dtype=np.uint8)
    for j in range(n):
        ti, tj = divmod(j, w)
        m = influence[:, j].reshape(h, w)
        tile = np.where(m, 255, 0).astype(np.uint8)
        tile[ti, tj] = 160
        out[ti * (h + 1):ti * (h + 1) + h, tj * (w + 1):tj * (w + 1) + w] = tile
    return out


def probe_receptive_field(h: int, w: int, layers: int, dense: bool = False, seed: int = 0,
                          out: str | Path | None = None) -> ProbeResult:
    influence = receptive_field(layers, h, w, dense=dense, seed=seed)
    n = h * w
    counts = influence.sum(axis=0)
    matches = None
    if layers == 1 and not dense:
        matches = all(set(np.flatnonzero(influence[:, j])) == line_union(h, w, j) for j in range(n))
    res = ProbeResult([h, w], layers, dense, n, int(counts.min()), int(counts.max()),
                      float(counts.mean() / n), bool((counts == n).all()), matches)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "receptive_field.json", res.to_json())
        write_ppm(out / "receptive_field.pgm", mask_mosaic(influence, h, w))
    return res

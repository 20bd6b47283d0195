"""Track files: newline-delimited JSON, one TrackRecord per line."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..checkpoint import atomic_write_text

FIELDS = ("video", "frame", "track_id", "bbox", "class", "score")


class TrackFileError(ValueError):
    def __init__(self, path, problems: list[tuple[int, str]]):
        self.path = str(path)
        self.problems = problems
        shown = "; ".join(f"line {ln}: {msg}" for ln, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{self.path}: {len(problems)} invalid record(s): {shown}{more}")


@dataclass(frozen=True)
class TrackRecord:
    video: str
    frame: int
    track_id: int
    bbox: tuple[float, float, float, float]
    cls: str = "object"
    score: float = 1.0

    def key(self) -> tuple[str, int, int]:
        return (self.video, self.frame, self.track_id)

    def to_dict(self) -> dict:
        return {"video": self.video, "frame": self.frame, "track_id": self.track_id,
                "bbox": [float(v) for v in self.bbox], "class": self.cls, "score": float(self.score)}

    @classmethod
    def from_dict(cls, obj: dict, image_size: tuple[float, float] | None = None) -> "TrackRecord":
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        unknown = set(obj) - set(FIELDS)
        if unknown:
            raise ValueError(f"unknown field(s) {sorted(unknown)}")
        for f in ("video", "frame", "track_id", "bbox"):
            if f not in obj:
                raise ValueError(f"missing field {f!r}")
        video = obj["video"]
        if not isinstance(video, str):
            raise ValueError("video must be a string")
        frame, tid = obj["frame"], obj["track_id"]
        if isinstance(frame, bool) or not isinstance(frame, int) or frame < 0:
            raise ValueError(f"frame must be an integer >= 0, got {frame!r}")
        if isinstance(tid, bool) or not isinstance(tid, int):
            raise ValueError(f"track_id must be an integer, got {tid!r}")
        bbox = obj["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4 or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in bbox):
            raise ValueError(f"bbox must be four finite numbers, got {bbox!r}")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            raise ValueError(f"bbox width and height must be positive, got {w} x {h}")
        if image_size is not None:
            iw, ih = image_size
            if x < 0 or y < 0 or x + w > iw or y + h > ih:
                raise ValueError(f"bbox {bbox} outside image bounds {iw}x{ih}")
        label = obj.get("class", "object")
        if not isinstance(label, str):
            raise ValueError("class must be a string")
        score = obj.get("score", 1.0)
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {score!r}")
        return cls(video, frame, tid, (x, y, w, h), label, float(score))


class TrackSet:
    def __init__(self, records: Iterable[TrackRecord] = ()):
        self.records: list[TrackRecord] = []
        self._keys: set[tuple[str, int, int]] = set()
        for r in records:
            self.add(r)

    def add(self, r: TrackRecord) -> None:
        if r.key() in self._keys:
            raise ValueError(f"duplicate (video, frame, track_id) {r.key()}")
        self._keys.add(r.key())
        self.records.append(r)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, TrackSet) and sorted(self.records, key=_order) == sorted(other.records, key=_order)

    def videos(self) -> list[str]:
        return sorted({r.video for r in self.records})

    def frames(self) -> set[tuple[str, int]]:
        return {(r.video, r.frame) for r in self.records}

    def grouped(self) -> dict[str, dict[int, list[TrackRecord]]]:
        out: dict[str, dict[int, list[TrackRecord]]] = defaultdict(lambda: defaultdict(list))
        for r in sorted(self.records, key=_order):
            out[r.video][r.frame].append(r)
        return out

    def filter(self, keep) -> "TrackSet":
        return TrackSet(r for r in self.records if keep(r))

    def classes(self) -> set[str]:
        return {r.cls for r in self.records}


def _order(r: TrackRecord):
    return (r.video, r.frame, r.track_id)


def parse_track_lines(lines: Iterable[str], source: str = "<memory>",
                      image_size: tuple[float, float] | None = None) -> TrackSet:
    ts = TrackSet()
    problems: list[tuple[int, str]] = []
    for ln, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = TrackRecord.from_dict(json.loads(line), image_size)
            ts.add(rec)
        except json.JSONDecodeError as exc:
            problems.append((ln, f"invalid JSON ({exc.msg})"))
        except ValueError as exc:
            problems.append((ln, str(exc)))
    if problems:
        raise TrackFileError(source, problems)
    return ts


def parse_track_file(path: str | Path, image_size: tuple[float, float] | None = None) -> TrackSet:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_track_lines(fh, str(path), image_size)


def dumps_track_set(ts: TrackSet) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in sorted(ts.records, key=_order))


def write_track_file(ts: TrackSet, path: str | Path) -> None:
    atomic_write_text(path, dumps_track_set(ts))

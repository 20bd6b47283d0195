"""Checkpoints: one flat little-endian float64 blob plus a JSON manifest that
maps each tensor name to its shape and byte offset."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT = "effowt-checkpoint-1"


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(state: dict[str, np.ndarray], prefix: str | Path) -> tuple[Path, Path]:
    """Write ``<prefix>.bin`` and ``<prefix>.json``; names are stored sorted."""
    prefix = Path(prefix)
    tensors, chunks, offset = {}, [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": FORMAT, "dtype": "float64", "total_bytes": offset, "tensors": tensors}
    bin_path, json_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    atomic_write_bytes(bin_path, b"".join(chunks))
    atomic_write_text(json_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return bin_path, json_path


def load_checkpoint(prefix: str | Path) -> dict[str, np.ndarray]:
    prefix = Path(prefix)
    json_path, bin_path = prefix.with_suffix(".json"), prefix.with_suffix(".bin")
    try:
        manifest = json.loads(json_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {json_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{json_path}: unsupported format {manifest.get('format')!r}")
    blob = bin_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{bin_path}: {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    out = {}
    for name, meta in manifest["tensors"].items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = meta["offset"]
        if start + 8 * n > len(blob):
            raise CheckpointError(f"{name}: extends past the end of {bin_path}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)
    return out


def namespace(state: dict[str, np.ndarray], ns: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in state.items() if k.startswith(ns + ".")}

"""Retained-for-backward byte accounting.

Usage::

    with instrument() as rec:
        loss = model_step()
        loss.backward()
    stats = rec.stats()

A saved buffer is counted once no matter how many nodes hold it; Parameters
are weights, not activations, and are never counted.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Node, Parameter, Tensor, _state


@dataclass
class GraphStats:
    peak_retained_bytes: int = 0
    retained_by_module: dict[str, int] = field(default_factory=dict)
    num_saved_tensors: int = 0
    entries: list[tuple[str, str, int]] = field(default_factory=list, compare=False, repr=False)

    def bytes_under(self, prefix: str) -> int:
        """Total bytes attributed to module paths starting with ``prefix``."""
        return sum(
            b for name, b in self.retained_by_module.items()
            if name == prefix or name.startswith(prefix + ".")
        )


def _buffer_key(obj) -> tuple[int, int]:
    # Saved items are kept alive by the recorder, so an address cannot be
    # reused while its entry is live; a Tensor and its array share one key.
    arr = obj.data if isinstance(obj, Tensor) else obj
    return (arr.__array_interface__["data"][0], int(arr.nbytes))


def _nbytes(obj) -> int:
    if isinstance(obj, Tensor):
        return int(obj.data.nbytes)
    if isinstance(obj, np.ndarray):
        return int(obj.nbytes)
    return 0


class Recorder:
    def __init__(self):
        self._live: dict[tuple[int, int], list] = {}  # buffer -> [obj, refcount, nbytes]
        self.live_bytes = 0
        self.peak_bytes = 0
        self.by_module: dict[str, int] = {}
        self.entries: list[tuple[str, str, int]] = []
        self.num_saved = 0

    def retain(self, node: Node):
        for obj in node.saved:
            if isinstance(obj, Parameter) or not isinstance(obj, (Tensor, np.ndarray)):
                continue
            k = _buffer_key(obj)
            slot = self._live.get(k)
            if slot is not None:
                slot[1] += 1
                continue
            nb = _nbytes(obj)
            self._live[k] = [obj, 1, nb]
            if isinstance(obj, Tensor):
                obj.retained_bytes = nb
            self.live_bytes += nb
            self.num_saved += 1
            self.by_module[node.scope] = self.by_module.get(node.scope, 0) + nb
            self.entries.append((node.scope, node.op, nb))
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def release(self, node: Node):
        for obj in node.saved:
            if isinstance(obj, Parameter) or not isinstance(obj, (Tensor, np.ndarray)):
                continue
            slot = self._live.get(_buffer_key(obj))
            if slot is None:
                continue
            slot[1] -= 1
            if slot[1] == 0:
                self.live_bytes -= slot[2]
                del self._live[_buffer_key(obj)]

    def stats(self) -> GraphStats:
        return GraphStats(
            peak_retained_bytes=int(self.peak_bytes),
            retained_by_module=dict(sorted(self.by_module.items())),
            num_saved_tensors=self.num_saved,
            entries=list(self.entries),
        )


@contextlib.contextmanager
def instrument():
    prev = _state.recorder
    rec = Recorder()
    _state.recorder = rec
    try:
        yield rec
    finally:
        _state.recorder = prev


def collect_stats(step) -> GraphStats:
    """Run ``step()`` (one forward+backward) under instrumentation."""
    with instrument() as rec:
        step()
    return rec.stats()

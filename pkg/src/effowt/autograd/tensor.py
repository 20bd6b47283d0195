"""Dense float64 tensors with reverse-mode gradients.

Each differentiable op builds a :class:`Node` that declares exactly which
arrays it keeps for the backward pass. The accounting layer sums those
declarations, so the retained-byte numbers reported elsewhere are a direct
consequence of which inputs require gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class AutogradError(RuntimeError):
    pass


class ShapeError(AutogradError, ValueError):
    """Raised when operand shapes do not conform."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class GraphConsumedError(AutogradError):
    pass


class NonFiniteError(AutogradError, FloatingPointError):
    def __init__(self, op: str, where: str):
        super().__init__(f"{op}: non-finite values in {where}")
        self.op = op


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.strict = False
        self.anomaly = False
        self.first_nonfinite: str | None = None
        self.recorder = None  # set by accounting.instrument()
        self.scopes: list[str] = []


_state = _State()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as an op sees or makes inf/nan."""
    prev = _state.strict
    _state.strict = enabled
    try:
        yield
    finally:
        _state.strict = prev


@contextlib.contextmanager
def detect_anomaly():
    """Remember the first op whose output is non-finite (see :func:`first_nonfinite_op`)."""
    prev = _state.anomaly, _state.first_nonfinite
    _state.anomaly = True
    _state.first_nonfinite = None
    try:
        yield
    finally:
        _state.anomaly, _state.first_nonfinite = prev


def first_nonfinite_op() -> str | None:
    return _state.first_nonfinite


@contextlib.contextmanager
def scope(name: str):
    """Attribute retained activations created inside to module path ``name``."""
    _state.scopes.append(name)
    try:
        yield
    finally:
        _state.scopes.pop()


def current_scope() -> str:
    return _state.scopes[-1] if _state.scopes else ""


class Node:
    """Backward record of one op application."""

    __slots__ = ("op", "parents", "backward_fn", "saved", "scope", "consumed", "__weakref__")

    def __init__(self, op, parents, backward_fn, saved):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.saved = saved
        self.scope = current_scope()
        self.consumed = False

    def release(self):
        rec = _state.recorder
        if rec is not None and self.saved:
            rec.release(self)
        self.saved = ()
        self.backward_fn = None
        self.consumed = True


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: Node | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.retained_bytes = 0
        self._node = _node

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar (implemented in ops) -------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        from . import ops
        return ops.swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    # -- autograd -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        backward(self, grad)


class Parameter(Tensor):
    """A named leaf weight. ``trainable`` is the freeze mask."""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool):
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(
    op: str,
    out: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray, tuple], Iterable[np.ndarray | None]],
    saved: Callable[[], tuple] | tuple = (),
) -> Tensor:
    """Wrap ``out`` in a Tensor and, if needed, record the backward node.

    ``backward_fn(grad_out, saved)`` returns one gradient (or None) per parent.
    ``saved`` lists the Tensors or arrays the backward needs; may be a thunk so
    ops only materialize what the current requires_grad pattern demands.
    """
    if _state.strict:
        for p in parents:
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(op, "input")
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(op, "output")
    elif _state.anomaly and _state.first_nonfinite is None and not np.all(np.isfinite(out)):
        _state.first_nonfinite = op

    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out)
    items = saved() if callable(saved) else tuple(saved)
    node = Node(op, tuple(parents), backward_fn, items)
    t = Tensor(out, requires_grad=True, _node=node)
    rec = _state.recorder
    if rec is not None and items:
        rec.retain(node)
    return t


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        node = t._node
        if node is not None:
            if node.consumed:
                raise GraphConsumedError(
                    f"backward through consumed graph (op {node.op!r}); rebuild the forward pass"
                )
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None):
    """Reverse-mode sweep from ``loss``; populates ``.grad`` on trainable leaves.

    The graph is single-use: saved activations are released as each node is
    processed, and a second call raises :class:`GraphConsumedError`.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    if loss._node is not None and loss._node.consumed:
        raise GraphConsumedError("backward called twice on the same graph")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None and t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if g is not None:
            pgrads = node.backward_fn(g, node.saved)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(node.op, f"gradient shape {pg.shape} != input shape {p.shape}")
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg
        node.release()

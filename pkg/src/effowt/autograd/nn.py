"""Module containers and the standard layers built on the primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, scope


def trunc_normal(rng: np.random.Generator | None, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations.

    With ``rng=None`` a read-only zero view is returned: the shape is known but
    nothing is allocated, which is enough for parameter counting.
    """
    shape = tuple(int(s) for s in shape)
    if rng is None:
        return np.broadcast_to(np.float64(0.0), shape)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def constant(rng: np.random.Generator | None, shape, value: float) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if rng is None:
        return np.broadcast_to(np.float64(value), shape)
    return np.full(shape, float(value))


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_path", "")

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        with scope(self._path or type(self).__name__):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, m in self.named_modules(prefix):
            for pname, p in m._params.items():
                yield (f"{mod_name}.{pname}" if mod_name else pname), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> "Module":
        """Stamp hierarchical paths on every submodule and Parameter."""
        for mod_name, m in self.named_modules(prefix):
            object.__setattr__(m, "_path", mod_name)
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_params(self, trainable_only: bool = False) -> int:
        return int(sum(p.size for p in self.parameters() if p.trainable or not trainable_only))


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (d_out, d_in), std))
        self.bias = Parameter(constant(rng, (d_out,), 0.0)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng=None, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True, std: float | None = None):
        super().__init__()
        if std is None:
            std = float(np.sqrt(2.0 / (c_in // groups * kernel * kernel)))  # He init
        self.weight = Parameter(trunc_normal(rng, (c_out, c_in // groups, kernel, kernel), std))
        self.bias = Parameter(constant(rng, (c_out,), 0.0)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, rng=None, eps: float = ops.LN_EPS):
        super().__init__()
        self.weight = Parameter(constant(rng, (dim,), 1.0))
        self.bias = Parameter(constant(rng, (dim,), 0.0))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, rng=None, eps: float = ops.LN_EPS):
        super().__init__()
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.weight = Parameter(constant(rng, (channels,), 1.0))
        self.bias = Parameter(constant(rng, (channels,), 0.0))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.weight, self.bias, self.eps)

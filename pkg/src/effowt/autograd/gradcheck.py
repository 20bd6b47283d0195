from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import NonFiniteError, Parameter, Tensor, no_grad


def _fd_stencil(f: Callable[[], float], arr: np.ndarray, flat_idx: int, eps: float) -> float:
    """Five-point central difference along one coordinate of ``arr`` (in place)."""
    view = arr.reshape(-1)
    x0 = view[flat_idx]
    vals = []
    for step in (2.0, 1.0, -1.0, -2.0):
        view[flat_idx] = x0 + step * eps
        vals.append(f())
    view[flat_idx] = x0
    fp2, fp1, fm1, fm2 = vals
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError("grad_check", "finite-difference evaluation")
    return (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * eps)


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray, atol: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    eps: float = 1e-4,
    atol: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and finite-difference gradients.

    ``f`` maps a tensor to a scalar tensor. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, atol)``. ``max_coords`` limits the check to a
    random subset of coordinates for large inputs.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("grad_check", "function output")
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    probe = base.copy()

    def evaluate() -> float:
        with no_grad():
            return float(f(Tensor(probe)).data)

    coords = _select(base.size, max_coords, seed)
    numeric = np.array([_fd_stencil(evaluate, probe, i, eps) for i in coords])
    return float(_rel_errors(analytic.reshape(-1)[coords], numeric, atol).max()) if coords.size else 0.0


def _select(n: int, max_coords: int | None, seed: int) -> np.ndarray:
    if max_coords is None or n <= max_coords:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=max_coords, replace=False))


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-4,
    atol: float = 1e-6,
    max_coords: int | None = 24,
    seed: int = 0,
) -> dict[str, float]:
    """Check parameter gradients of a zero-argument loss; returns per-param max error."""
    params = [p for p in params if p.trainable]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    out: dict[str, float] = {}
    for k, p in enumerate(params):
        coords = _select(p.size, max_coords, seed + k)
        with no_grad():
            numeric = np.array([
                _fd_stencil(lambda: float(loss_fn().data), p.data, i, eps) for i in coords
            ])
        a = analytic[id(p)].reshape(-1)[coords]
        out[p.name or f"param{k}"] = float(_rel_errors(a, numeric, atol).max()) if coords.size else 0.0
        p.grad = None
    return out

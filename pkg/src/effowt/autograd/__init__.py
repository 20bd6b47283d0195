"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from . import ops
from .accounting import GraphStats, Recorder, collect_stats, instrument
from .gradcheck import grad_check, grad_check_params
from .nn import Conv2d, GroupNorm, LayerNorm, Linear, Module, ModuleList
from .optim import AdamW
from .tensor import (
    AutogradError,
    GraphConsumedError,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    detect_anomaly,
    first_nonfinite_op,
    no_grad,
    scope,
    strict_mode,
)

__all__ = [
    "AdamW", "AutogradError", "Conv2d", "GraphConsumedError", "GraphStats", "GroupNorm",
    "LayerNorm", "Linear", "Module", "ModuleList", "NonFiniteError", "Parameter", "Recorder",
    "ShapeError", "Tensor", "backward", "collect_stats", "detect_anomaly", "first_nonfinite_op",
    "grad_check", "grad_check_params", "instrument", "no_grad", "ops", "scope", "strict_mode",
]

"""Minimal reverse-mode differentiation engine over flat parameter vectors."""

from .graph import (
    CompGraph,
    GraphError,
    NumericError,
    ParamVector,
    Var,
    backward,
    record,
)
from .ops import (
    Dual,
    absolute,
    bilinear,
    clip,
    concat,
    cos,
    exp,
    gradient_from_tangent,
    log,
    mean_,
    reshape,
    sigmoid,
    sin,
    softplus,
    spatial_gradient,
    spatial_seed,
    sqrt,
    stack,
    sum_,
    take_rows,
    tanh,
    transpose,
    value_of,
)

__all__ = [
    "CompGraph", "GraphError", "NumericError", "ParamVector", "Var",
    "backward", "record", "Dual", "absolute", "bilinear", "clip", "concat",
    "cos", "exp", "gradient_from_tangent", "log", "mean_", "reshape",
    "sigmoid", "sin", "softplus", "spatial_gradient", "spatial_seed", "sqrt",
    "stack", "sum_", "take_rows", "tanh", "transpose", "value_of",
]

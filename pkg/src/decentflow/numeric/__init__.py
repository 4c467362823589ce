from .rng import RngStream, choice, gaussian, label_id, normal, permutation, uniform
from .tensor import (
    LN_EPS,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clamp_min,
    gelu,
    index,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mean_sq,
    mul,
    parameter,
    reshape,
    silu,
    softmax,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "LN_EPS",
    "RngStream",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "clamp_min",
    "choice",
    "gaussian",
    "gelu",
    "index",
    "label_id",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean",
    "mean_sq",
    "mul",
    "normal",
    "parameter",
    "permutation",
    "reshape",
    "silu",
    "softmax",
    "sub",
    "sum_",
    "transpose",
    "uniform",
]

from .gradcheck import grad_check, numerical_grad
from .ops import (
    add,
    add_channel_bias,
    avg_pool2,
    bilinear_matrix,
    concat,
    conv2d,
    dense,
    dense_and_activation,
    group_norm,
    mean,
    mul,
    reshape,
    silu,
    square,
    sub,
    upsample2,
)
from .ops import sum as sum_all
from .optim import AdamState, ParamStore, adam_step
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, as_tensor, backward

__all__ = [
    "AdamState",
    "NonFiniteError",
    "ParamStore",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "add_channel_bias",
    "as_tensor",
    "avg_pool2",
    "backward",
    "bilinear_matrix",
    "concat",
    "conv2d",
    "dense",
    "dense_and_activation",
    "grad_check",
    "group_norm",
    "mean",
    "mul",
    "numerical_grad",
    "reshape",
    "silu",
    "square",
    "sub",
    "sum_all",
    "upsample2",
]

"""Autodiff engine: float64 tape, reverse-mode gradients, MLP building blocks."""

from .tensor import (
    Tensor,
    no_grad,
    grad_enabled,
    backward,
    input_gradient,
    add,
    sub,
    mul,
    div,
    neg,
    matmul,
    swap_last,
    sum,
    mean,
    reshape,
    broadcast_to,
    concat,
    slice_axis,
    pad_axis,
    exp,
    log,
    sqrt,
    square,
    tanh,
    sigmoid,
    softplus,
    clip,
    detach,
    linear,
    layernorm,
    mish,
    simnorm,
    as_array,
)
from .layers import LayerSpec, param_names, init_params, mlp_forward

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "input_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "swap_last",
    "sum",
    "mean",
    "reshape",
    "broadcast_to",
    "concat",
    "slice_axis",
    "pad_axis",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "sigmoid",
    "softplus",
    "clip",
    "detach",
    "linear",
    "layernorm",
    "mish",
    "simnorm",
    "as_array",
    "LayerSpec",
    "param_names",
    "init_params",
    "mlp_forward",
]

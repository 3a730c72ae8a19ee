"""Minimal dense-tensor engine with reverse-mode differentiation."""
from .gradcheck import GradCheckReport, check_gradients, relative_error
from .optim import AdamState, CosineSchedule, ParamGroup, adam_step, clip_grad_norm, cosine_lr
from .tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    div,
    is_grad_enabled,
    layer_normalize,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    softmax,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "AdamState", "CosineSchedule", "GradCheckReport", "ParamGroup", "Tensor",
    "adam_step", "add", "as_tensor", "broadcast_to", "check_gradients", "clip_grad_norm",
    "concat", "cosine_lr", "div", "is_grad_enabled", "layer_normalize", "matmul", "mean",
    "mul", "neg", "no_grad", "power", "relative_error", "reshape", "softmax", "sub", "sum_",
    "transpose",
]

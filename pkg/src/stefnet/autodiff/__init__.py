"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .ops import (
    BatchNormState,
    add,
    batch_norm,
    concat_last_axis,
    conv2d_same,
    dense_affine,
    lstm_step,
    mean_abs_error,
    mean_all,
    mul,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    sum_all,
    take,
    tanh,
)
from .optim import AdamState, adam_update
from .tensor import GradientTape, Record, ShapeError, Tensor, active_tape, backward, no_grad

__all__ = [
    "AdamState", "BatchNormState", "GradientTape", "Record", "ShapeError", "Tensor",
    "active_tape", "adam_update", "add", "backward", "batch_norm", "concat_last_axis",
    "conv2d_same", "dense_affine", "lstm_step", "mean_abs_error", "mean_all", "mul", "no_grad",
    "relu", "reshape", "sigmoid", "stack", "sub", "sum_all", "take", "tanh",
]

"""Minimal reverse-mode autodiff over numpy arrays."""
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .ops import (
    activation,
    add,
    batch_norm,
    conv2d,
    conv3d,
    log_softmax,
    mean,
    mul,
    relu,
    resample_volume,
    reshape,
    scatter_mean,
    stack,
    sub,
    tanh,
)
from .ops import sum as reduce_sum
from .optim import SGD, AdamW, LrSchedule, Optimizer, OptimizerKind, ScheduleKind
from .tensor import Parameter, Tensor, as_tensor, backward

__all__ = [
    "AdamW", "LrSchedule", "Optimizer", "OptimizerKind", "Parameter", "SGD", "ScheduleKind", "Tensor",
    "activation", "add", "as_tensor", "backward", "batch_norm", "conv2d", "conv3d", "grad_check",
    "load_checkpoint", "log_softmax", "mean", "mul", "reduce_sum", "relu", "resample_volume", "reshape",
    "save_checkpoint", "scatter_mean", "stack", "sub", "tanh",
]

"""Dense float64 tensor kernels, a small gradient tape, and Adam."""

from . import autograd
from .autograd import Node, Tape
from .gradcheck import CheckReport, ContractError, grad_check
from .io import FormatError, load_tensor, pack_tensor, save_tensor, unpack_tensor
from .kernels import (
    DegenerateStatsError,
    DimensionError,
    WindowError,
    adain,
    adaptive_avg_pool1d,
    adaptive_avg_pool2d,
    conv1d_forward,
    gelu,
    linear_forward,
)
from .optim import OptimState, adam_step, cosine_lr

__all__ = [
    "autograd",
    "Node",
    "Tape",
    "CheckReport",
    "ContractError",
    "grad_check",
    "FormatError",
    "load_tensor",
    "pack_tensor",
    "save_tensor",
    "unpack_tensor",
    "DegenerateStatsError",
    "DimensionError",
    "WindowError",
    "adain",
    "adaptive_avg_pool1d",
    "adaptive_avg_pool2d",
    "conv1d_forward",
    "gelu",
    "linear_forward",
    "OptimState",
    "adam_step",
    "cosine_lr",
]

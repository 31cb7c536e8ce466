"""Minimal reverse-mode automatic differentiation for the TTDSR network."""

from .ops import (add, add_scalars, concat_channels, conv2d, l2_penalty, leaky_relu,
                  mse_loss, mul_const, shared_spectrum, slice_channels)
from .optim import AdamState, OptimizerStateError, adam_step, glorot_limit, glorot_uniform_init
from .tensor import Tape, Tensor

__all__ = [
    "AdamState", "OptimizerStateError", "Tape", "Tensor", "adam_step", "add", "add_scalars",
    "concat_channels", "conv2d", "glorot_limit", "glorot_uniform_init", "l2_penalty",
    "leaky_relu", "mse_loss", "mul_const", "shared_spectrum", "slice_channels",
]

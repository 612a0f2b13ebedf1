"""Minimal dense tensor arithmetic with tape-based reverse-mode autodiff."""
from .tensor import NonFiniteError, Tape, Tensor, active_tape, as_tensor
from . import ops
from .ops import (add, avgpool2, concat, conv3d, div, exp, hard_onehot_st,
                  log, log_softmax, matmul, mul, narrow, neg, reshape,
                  scatter_splat, sigmoid, silu, softmax, sqrt, sub, take,
                  tmean, transpose, trilinear_sample, tsum, upsample2)
from .optim import AdamW, lr_schedule

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "active_tape", "as_tensor", "ops",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "sigmoid",
    "silu", "tsum", "tmean", "matmul", "reshape", "transpose", "concat",
    "narrow", "take", "softmax", "log_softmax", "conv3d", "trilinear_sample",
    "scatter_splat", "avgpool2", "upsample2", "hard_onehot_st",
    "AdamW", "lr_schedule",
]

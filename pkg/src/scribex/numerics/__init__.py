"""Dense-array arithmetic with reverse-mode differentiation."""

from .grid import Grid, as_grid, constant, full, ones, variable, zeros
from .gradcheck import gradcheck
from .ops import (
    LOG_CLAMP_MIN,
    absolute,
    add,
    add_channel_bias,
    bilinear_sample,
    concat_channels,
    conv2d,
    div,
    global_avg_pool,
    gradx,
    grady,
    log,
    matmul,
    maximum,
    maxpool2,
    mean,
    mul,
    neg,
    reshape,
    sigmoid,
    softmax_channels,
    sqrt,
    sub,
    take_channel,
    total,
    upsample_nearest2,
)
from .precision import current_dtype, precision, set_precision
from .rng import RngState
from .tape import Tape, backward

__all__ = [
    "Grid",
    "LOG_CLAMP_MIN",
    "RngState",
    "Tape",
    "absolute",
    "add",
    "add_channel_bias",
    "as_grid",
    "backward",
    "bilinear_sample",
    "concat_channels",
    "constant",
    "conv2d",
    "current_dtype",
    "div",
    "full",
    "global_avg_pool",
    "gradcheck",
    "gradx",
    "grady",
    "log",
    "matmul",
    "maximum",
    "maxpool2",
    "mean",
    "mul",
    "neg",
    "ones",
    "precision",
    "reshape",
    "set_precision",
    "sigmoid",
    "softmax_channels",
    "sqrt",
    "sub",
    "take_channel",
    "total",
    "upsample_nearest2",
    "variable",
    "zeros",
]

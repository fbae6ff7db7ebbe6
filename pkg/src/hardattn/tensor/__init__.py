"""Minimal dense tensor engine: reverse-mode tape, layers, Adam, checkpoints."""

from . import functional
from .engine import (
    Tensor,
    TensorError,
    add,
    amax,
    as_tensor,
    backward,
    clamp_min,
    clear_tape,
    concat,
    cumsum,
    default_dtype,
    div,
    exp,
    get_default_dtype,
    is_grad_enabled,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    reshape,
    set_default_dtype,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    take_along_axis,
    tanh,
    tape_length,
    transpose,
    where,
)
from .functional import batch_norm, conv2d, conv_transpose2d, dropout, layer_norm
from .nn import (
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
)
from .optim import Adam, AdamState, OptimConfig, adam_step, plateau_schedule
from .rng import Streams, substream

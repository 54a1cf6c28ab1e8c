from .kernels import BACKEND
from .optim import AdamWState, CosineSchedule, adamw_step, cosine_lr
from .tensor import (
    Tape,
    Tensor,
    absolute,
    active_tape,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    diagonal,
    div,
    dropout,
    elu,
    exp,
    gather_rows,
    l2_normalize,
    leaky_relu,
    linear,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    reshape,
    segment_softmax,
    segment_sum,
    sigmoid,
    sub,
    total,
    transpose,
)

__all__ = [
    "BACKEND", "AdamWState", "CosineSchedule", "adamw_step", "cosine_lr",
    "Tape", "Tensor", "absolute", "active_tape", "add", "as_tensor", "backward",
    "clip", "concat", "diagonal", "div", "dropout", "elu", "exp", "gather_rows",
    "l2_normalize", "leaky_relu", "linear", "log", "log_softmax", "matmul", "mul",
    "neg", "reshape", "segment_softmax", "segment_sum", "sigmoid", "sub", "total",
    "transpose",
]

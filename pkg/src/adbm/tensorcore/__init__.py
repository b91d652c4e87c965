from .tensor import (
    GradientTape,
    NonFiniteError,
    ShapeError,
    TapeError,
    Tensor,
    activation_stats,
    add,
    as_tensor,
    backward,
    clamp,
    concat,
    cross_entropy,
    div,
    exp,
    grad,
    matmul,
    mean,
    mul,
    neg,
    paused,
    relu,
    reset_activation_stats,
    reshape,
    scale,
    silu,
    square,
    sub,
    sum,
    take_rows,
)
from .checkpoint import NondeterministicSegmentError, checkpointed_compose, compose
from .nn import Mlp

__all__ = [
    "GradientTape", "NonFiniteError", "ShapeError", "TapeError", "Tensor", "activation_stats",
    "add", "as_tensor", "backward", "clamp", "concat", "cross_entropy", "div", "exp", "grad",
    "matmul", "mean", "mul", "neg", "paused", "relu", "reset_activation_stats", "reshape",
    "scale", "silu", "square", "sub", "sum", "take_rows", "NondeterministicSegmentError",
    "checkpointed_compose", "compose", "Mlp",
]

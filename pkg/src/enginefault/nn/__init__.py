"""Minimal numpy tensor library with reverse-mode autodiff."""
from .functional import (
    RngState,
    causal_mask,
    cross_entropy,
    dropout,
    layer_norm,
    log_softmax,
    multi_head_attention,
    rnn_tanh,
    scaled_dot_product_attention,
    softmax,
    xavier_init,
)
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .optim import Adam, adam_step, clip_grad_norm, grad_norm, zero_grad
from .serialize import CheckpointError, read_params, write_params
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    exp,
    log,
    matmul,
    no_grad,
    relu,
    tanh,
)

__all__ = [
    "Adam", "CheckpointError", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "Parameter", "RngState", "ShapeError", "Tensor", "adam_step",
    "as_tensor", "causal_mask", "clip_grad_norm", "concat", "cross_entropy", "dropout", "exp",
    "grad_norm", "layer_norm", "log", "log_softmax", "matmul", "multi_head_attention",
    "no_grad", "read_params", "relu", "rnn_tanh", "scaled_dot_product_attention", "softmax",
    "tanh", "write_params", "xavier_init", "zero_grad",
]

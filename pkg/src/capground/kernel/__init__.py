"""Minimal differentiable-computation kernel.

Dense float64 tensors, reverse-mode gradients over a define-by-run graph,
an Adam optimizer, a finite-difference verification harness, and a binary
checkpoint format.
"""

from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy_with_logits,
    dropout,
    embedding,
    inner_last,
    matmul,
    mean,
    mul,
    narrow,
    no_grad,
    parameter,
    relu,
    reshape,
    sigmoid,
    softmax,
    tensor_sum,
    tanh,
    weighted_sum,
)
from .layers import (
    AttentionParams,
    LSTMParams,
    additive_attention,
    init_uniform,
    lstm_cell,
)
from .optim import AdamState, adam_step, clip_global_norm
from .gradcheck import GradCheckReport, finite_diff_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "cross_entropy_with_logits",
    "dropout",
    "embedding",
    "inner_last",
    "matmul",
    "mean",
    "mul",
    "narrow",
    "no_grad",
    "parameter",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "tensor_sum",
    "tanh",
    "weighted_sum",
    "AttentionParams",
    "LSTMParams",
    "additive_attention",
    "init_uniform",
    "lstm_cell",
    "AdamState",
    "adam_step",
    "clip_global_norm",
    "GradCheckReport",
    "finite_diff_check",
    "load_checkpoint",
    "save_checkpoint",
]

"""Minimal dense network kernel with analytic gradients."""

from .layers import (
    ParamStore,
    activation,
    batch_norm,
    graph_attention,
    init_attention,
    init_batch_norm,
    init_linear,
    init_mlp2,
    linear,
    mlp2,
    optimizer_step,
    scaled_attention,
)
from .tensor import Tensor, backprop

__all__ = [
    "ParamStore",
    "Tensor",
    "activation",
    "backprop",
    "batch_norm",
    "graph_attention",
    "init_attention",
    "init_batch_norm",
    "init_linear",
    "init_mlp2",
    "linear",
    "mlp2",
    "optimizer_step",
    "scaled_attention",
]

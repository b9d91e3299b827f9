from .graph import Graph, backprop, evaluate_graph
from .nn import (conv2d, cross_entropy, frobenius_loss, glorot_uniform, l2_norm, linear,
                 log_softmax, lstm, lstm_cell, maxpool2d, softmax)
from .optim import Optimizer, OptimizerState, clip_by_global_norm, optimizer_step
from .tensor import NonFiniteError, Tensor, no_grad

__all__ = [
    "Graph", "backprop", "evaluate_graph",
    "conv2d", "cross_entropy", "frobenius_loss", "glorot_uniform", "l2_norm", "linear",
    "log_softmax", "lstm", "lstm_cell", "maxpool2d", "softmax",
    "Optimizer", "OptimizerState", "clip_by_global_norm", "optimizer_step",
    "NonFiniteError", "Tensor", "no_grad",
]

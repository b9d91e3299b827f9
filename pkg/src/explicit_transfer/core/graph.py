"""Named-parameter computation graphs on top of the tape-based Tensor.

A :class:`Graph` pairs a parameter dict with a forward function
``forward(params, inputs) -> {name: Tensor}``.  ``evaluate_graph`` records the
tape, ``backprop`` differentiates one of the recorded outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, as_tensor

ForwardFn = Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], Mapping[str, Tensor]]


@dataclass
class Graph:
    forward: ForwardFn
    parameters: dict[str, Tensor]
    input_names: tuple[str, ...] = ()
    outputs: dict[str, Tensor] | None = field(default=None, repr=False)


def evaluate_graph(graph: Graph, inputs: Mapping[str, object]) -> dict[str, Tensor]:
    unbound = [name for name in graph.input_names if name not in inputs]
    if unbound:
        raise KeyError(f"unbound graph inputs: {unbound}")
    bound = {k: as_tensor(v) for k, v in inputs.items()}
    out = graph.forward(graph.parameters, bound)
    graph.outputs = dict(out)
    return graph.outputs


def backprop(graph: Graph, loss_node: str = "loss") -> dict[str, np.ndarray]:
    """Gradients of ``loss_node`` for every parameter requiring gradients.

    Parameters the loss does not depend on get zeros.
    """
    if graph.outputs is None:
        raise RuntimeError("forward pass has not been evaluated")
    if loss_node not in graph.outputs:
        raise KeyError(f"no output named {loss_node!r}")
    loss = graph.outputs[loss_node]
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    for p in graph.parameters.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for k, p in graph.parameters.items() if p.requires_grad}

"""Adaptive-moment (Adam) and plain SGD parameter updates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    method: str = "adam"
    clip_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer method {self.method!r}")


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                   state: OptimizerState) -> OptimizerState:
    """Update ``params`` in place from ``grads`` and advance ``state``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {k}")
    if state.clip_norm is not None:
        grads = clip_by_global_norm({k: grads[k] for k in params}, state.clip_norm)

    state.step += 1
    lr = state.learning_rate
    if state.method == "sgd":
        for k, p in params.items():
            p.data = p.data - lr * grads[k]
        return state

    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return state


class Optimizer:
    """Convenience wrapper: reads ``.grad`` from the parameters it owns."""

    def __init__(self, params: Mapping[str, Tensor], **kwargs):
        self.params = dict(params)
        self.state = OptimizerState(**kwargs)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        optimizer_step(self.params, grads, self.state)

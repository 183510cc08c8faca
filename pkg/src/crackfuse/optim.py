"""AdamW optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .params import ParamStore


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus the shared step counter."""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam: decay scales parameters directly and
    never passes through the moment estimates."""

    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2,
                                    eps=eps, weight_decay=weight_decay)
        for name, t in params.trainable():
            self.state.m[name] = np.zeros_like(t.data)
            self.state.v[name] = np.zeros_like(t.data)

    def zero_grad(self):
        self.params.zero_grads()

    def step(self):
        s = self.state
        trainable = self.params.trainable()
        for name, t in trainable:
            if t.grad is None:
                raise UsageError(f"parameter {name!r} has no gradient; "
                                 "run backward() before step()")
        s.step += 1
        b1, b2 = s.beta1, s.beta2
        bc1 = 1.0 - b1 ** s.step
        bc2 = 1.0 - b2 ** s.step
        for name, t in trainable:
            g = t.grad
            m = s.m[name]
            v = s.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if s.weight_decay:
                t.data -= (s.lr * s.weight_decay) * t.data
            mhat = m / bc1
            vhat = v / bc2
            t.data -= (s.lr * mhat / (np.sqrt(vhat) + s.eps)).astype(t.data.dtype)

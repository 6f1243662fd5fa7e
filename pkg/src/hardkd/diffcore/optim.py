"""First-order optimizers (Adam with bias correction and L2 penalty)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter moment accumulators; moments start at zero at step 0."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
        )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0):
    """One Adam update, in place on the param arrays; returns (params, state).

    The L2 penalty is applied as weight_decay * param added to the gradient.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.isfinite(g).all():
            raise FloatingPointError(
                f"non-finite gradient at Adam step {t} (shape {g.shape})"
            )
        if weight_decay:
            g = g + weight_decay * p
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class Adam:
    """Adam over a list of leaf Tensors, reading their .grad buffers."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState.for_params([p.data for p in self.params])

    def step(self):
        grads = []
        for p in self.params:
            if p.grad is None:
                raise RuntimeError("parameter has no gradient; call backward() first")
            grads.append(p.grad)
        adam_step(
            [p.data for p in self.params], grads, self.state,
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            weight_decay=self.weight_decay,
        )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

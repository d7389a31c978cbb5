"""Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kprn.errors import ContractViolation


@dataclass
class AdamState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state

    def copy(self):
        return AdamState(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            step=self.step,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update, in place on ``params``.

    A parameter whose gradient is missing or identically zero keeps its value;
    only its moments decay. This makes zero gradients a fixed point even when
    momentum from earlier steps is non-zero.
    """
    if lr is None:
        lr = state.lr
    if lr < 0:
        raise ContractViolation(f"learning rate must be non-negative, got {lr}")
    for name in grads:
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        m, v = state.m.get(name), state.v.get(name)
        if m is None or not m.flags.writeable:
            m = state.m[name] = np.zeros_like(p.data) if m is None else m.copy()
        if v is None or not v.flags.writeable:
            v = state.v[name] = np.zeros_like(p.data) if v is None else v.copy()
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m *= b1
        v *= b2
        if g is None or not g.any():
            continue
        m += (1.0 - b1) * g
        v += (1.0 - b2) * (g * g)
        if lr == 0.0:
            continue
        p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params

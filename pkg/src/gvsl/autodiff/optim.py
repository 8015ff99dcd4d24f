"""Bias-corrected Adam."""

from dataclasses import dataclass, field

import numpy as np

from .graph import ShapeError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_update(param, grad, state, lr=1e-4):
    """One Adam step. Returns the new parameter; ``state`` is updated in place."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam shapes differ: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """Adam over a named group of parameters sharing one learning rate."""

    lr: float = 1e-4
    states: dict = field(default_factory=dict)

    def step(self, params, grads, names=None):
        names = sorted(params) if names is None else names
        out = dict(params)
        for name in names:
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(params[name])
            out[name] = adam_update(params[name], grads[name], self.states[name], self.lr)
        return out

"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second gradient moments and hyperparameters for one parameter."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, param, learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        return cls(
            m=np.zeros_like(param.data),
            v=np.zeros_like(param.data),
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(param, state):
    """One Adam update in place; a zero (or missing) gradient is a no-op."""
    g = param.grad
    if g is None:
        return param, state
    dt = param.data.dtype
    b1, b2 = dt.type(state.beta1), dt.type(state.beta2)
    state.step_count += 1
    t = state.step_count
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * (g * g)
    m_hat = state.m / dt.type(1 - state.beta1**t)
    v_hat = state.v / dt.type(1 - state.beta2**t)
    param.data -= dt.type(state.learning_rate) * m_hat / (np.sqrt(v_hat) + dt.type(state.epsilon))
    return param, state


class Adam:
    """Convenience wrapper stepping a list of parameters together."""

    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.states = [
            AdamState.create(p, learning_rate, beta1, beta2, epsilon) for p in self.params
        ]

    def step(self):
        for p, s in zip(self.params, self.states):
            adam_step(p, s)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

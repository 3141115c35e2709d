"""Adam with decoupled weight decay over a ParamSet.

Weight decay is applied directly to the weights, not mixed into the
moment estimates, so setting it to zero recovers plain Adam exactly.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParamSet
from .errors import ConfigError, ContractError


class OptimizerState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, params: ParamSet, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be non-negative, got {weight_decay}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(state: OptimizerState, params: ParamSet) -> None:
    """Apply one update in place, then zero every gradient buffer.

    Calling this twice without a backward() in between is a contract
    violation: the second call would consume all-zero gradients.
    """
    if set(state.m) != set(params.names()):
        raise ContractError("optimizer state does not match this ParamSet")
    if not params.any_grad_filled():
        raise ContractError("adam_step before backward: no gradient has been filled")

    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= state.lr * update
    params.zero_grads()

"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidShapeError


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One in-place Adam update of ``params`` (numpy arrays or tensors).

    Missing gradients (``None``) are treated as zero. Returns ``(params, state)``.
    """
    arrays = [p if isinstance(p, np.ndarray) else p.data for p in params]
    if len(grads) != len(arrays):
        raise InvalidShapeError(f"{len(arrays)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in arrays]
        state.v = [np.zeros_like(p) for p in arrays]
    elif len(state.m) != len(arrays):
        raise InvalidShapeError("optimizer state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise InvalidShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.learning_rate == 0:
            continue  # subtracting -0.0 would flip the sign bit of zero parameters
        step = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps_hat)
        p -= step.astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Adam bound to a fixed, ordered parameter list."""

    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, eps_hat)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

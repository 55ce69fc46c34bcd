"""ADAM optimizer over named parameter dictionaries."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor


class AdamState:
    """First/second moment buffers per parameter plus the step counter."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.second_moment = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected ADAM update, reading gradients from ``p.grad``.

    Parameters are visited in sorted-name order so updates are reproducible
    regardless of dict construction order.  A non-finite gradient aborts the
    whole step before any parameter is touched.
    """
    names = sorted(params)
    grads = {}
    for name in names:
        g = params[name].grad
        if g is None:
            g = np.zeros_like(params[name].data)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        grads[name] = g
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in names:
        g = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        params[name].data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def zero_grad(params: dict[str, Tensor]) -> None:
    """Drop accumulated gradients before the next backward pass."""
    for t in params.values():
        t.grad = None

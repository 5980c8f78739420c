"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore


class AdamWState:
    """First/second moment buffers per parameter, plus the step counter."""

    def __init__(self, store: ParamStore, names=None):
        self.names = list(names) if names is not None else store.names()
        self.m = {n: np.zeros_like(store[n].data) for n in self.names}
        self.v = {n: np.zeros_like(store[n].data) for n in self.names}
        self.t = 0


def adamw_step(
    store: ParamStore,
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One decoupled-decay update over the parameters tracked in `state`.

    Parameters whose gradient was never touched this step (grad is None)
    are treated as having zero gradient; weight decay still applies.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in state.names:
        p = store[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def cosine_lr(step: int, total: int, lr_base: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_base at step 0 to lr_min at step `total`."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr_base
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + np.cos(np.pi * step / total))

"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

LR_MAX = 3e-4
LR_MIN = 1e-6


def cosine_lr(it: int, total: int, lr_max: float = LR_MAX, lr_min: float = LR_MIN) -> float:
    if it < 0 or it > total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    if total == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * it / total))


class AdamW:
    """Moments are keyed by parameter name so they can be checkpointed."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = dict(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.step = 0

    def update(self, lr: float) -> None:
        """One step using the ``grad`` held by each parameter (missing grads count as zero)."""
        adamw_step(self, {n: p.grad for n, p in self.params.items()}, lr)

    def load_state(self, m: dict, v: dict, step: int) -> None:
        for n in self.params:
            self.m[n] = np.array(m[n], dtype=self.params[n].dtype)
            self.v[n] = np.array(v[n], dtype=self.params[n].dtype)
        self.step = step


def adamw_step(state: AdamW, grads: dict, lr: float, beta1: float | None = None, beta2: float | None = None,
               eps: float | None = None, weight_decay: float | None = None) -> None:
    """In-place decoupled AdamW update of every parameter in ``state``."""
    b1 = state.beta1 if beta1 is None else beta1
    b2 = state.beta2 if beta2 is None else beta2
    eps = state.eps if eps is None else eps
    wd = state.weight_decay if weight_decay is None else weight_decay
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in state.params.items():
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * wd
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)

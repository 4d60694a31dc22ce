"""Optimizers and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .diffcore import Tensor


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then half-cosine down to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def decays(name: str, p: Tensor) -> bool:
    """Weight decay applies to matrices only, never to biases, norms or learnable tokens."""
    return p.ndim >= 2 and "token" not in name


class AdamW:
    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.05,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            if decays(name, p) and self.weight_decay:
                p.data = p.data * p.dtype.type(1.0 - lr * self.weight_decay)
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{n}": a for n, a in self.m.items()}
        out.update({f"v/{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], t: int):
        for n in self.m:
            self.m[n] = np.array(state[f"m/{n}"])
            self.v[n] = np.array(state[f"v/{n}"])
        self.t = t


class SGD:
    """SGD with heavy-ball momentum and decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 1e-4, momentum: float = 0.9):
        self.params = params
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        for name, p in self.params.items():
            if decays(name, p) and self.weight_decay:
                p.data = p.data * p.dtype.type(1.0 - lr * self.weight_decay)
            if p.grad is None:
                continue
            buf = self.m[name] = self.momentum * self.m[name] + p.grad
            p.data = (p.data - lr * buf).astype(p.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {f"m/{n}": a for n, a in self.m.items()}

    def load_state(self, state: dict[str, np.ndarray], t: int):
        for n in self.m:
            self.m[n] = np.array(state[f"m/{n}"])
        self.t = t


def make_optimizer(kind: str, params: dict[str, Tensor], weight_decay: float):
    if kind == "adamw":
        return AdamW(params, weight_decay)
    if kind == "sgd":
        return SGD(params, weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")

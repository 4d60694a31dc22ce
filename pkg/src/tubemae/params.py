"""Parameter containers: a tiny Module tree over diffcore tensors."""

from __future__ import annotations

import copy
import hashlib
from typing import Iterator

import numpy as np

from .diffcore import Tensor, default_dtype


class Module:
    """Collects ``Tensor``/``Module``/list-of-``Module`` attributes as a named tree."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name in own:
                p = own[name]
                if p.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def clone(self) -> "Module":
        return copy.deepcopy(self)

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def zeros(*shape) -> Tensor:
    return param(np.zeros(shape, dtype=default_dtype()))


def ones(*shape) -> Tensor:
    return param(np.ones(shape, dtype=default_dtype()))


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return param(rng.uniform(-bound, bound, size=shape).astype(default_dtype()))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    x = rng.standard_normal(size=shape)
    x = np.clip(x, -2.0, 2.0) * std
    return param(x.astype(default_dtype()))


def state_hash(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name]).tobytes())
    return h.hexdigest()

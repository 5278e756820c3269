"""Named parameter storage and the Adam update rule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def gaussian_init(rng, shape, fan_in: int | None = None) -> Tensor:
    """Trainable tensor drawn from N(0, 1/fan_in); fan_in defaults to the last axis."""
    if fan_in is None:
        fan_in = shape[-1] if len(shape) > 1 else shape[0]
    std = 1.0 / np.sqrt(max(1, fan_in))
    return Tensor(rng.normal(shape) * std, requires_grad=True)


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class ParamStore:
    """Flat registry of trainable tensors keyed by dotted-path names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ContractError(f"parameter {name!r} must require gradients")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self, names: Iterable[str] | None = None) -> None:
        for n in (self.names() if names is None else names):
            p = self._params[n]
            p.grad = np.zeros_like(p.data)


def adam_step(store: ParamStore, lr: float = 1e-3, config: AdamConfig = AdamConfig(),
              names: Iterable[str] | None = None) -> None:
    """One Adam update over the named subset (default: every parameter).

    Gradients must be populated before the call and are zeroed afterwards.
    """
    selected = store.names() if names is None else sorted(names)
    for n in selected:
        if n not in store:
            raise ContractError(f"unknown parameter {n!r}")
        if store[n].grad is None:
            raise ContractError(f"parameter {n!r} has no gradient; run backward first")
    store.step_count += 1
    t = store.step_count
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for n in selected:
        p = store[n]
        g = p.grad
        m = store._m.get(n)
        if m is None:
            m = store._m.setdefault(n, np.zeros_like(p.data))
            store._v[n] = np.zeros_like(p.data)
        v = store._v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.grad = np.zeros_like(p.data)

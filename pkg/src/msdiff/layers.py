"""Small trainable building blocks shared by the encoders and the denoiser."""
from __future__ import annotations

import numpy as np

from .optim import gaussian_init
from .tensor import Tensor, layer_norm, silu


def sinusoid_table(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos position codes, one row per position."""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


class Linear:
    def __init__(self, w: Tensor, b: Tensor | None):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, bias: bool = True, zero: bool = False) -> "Linear":
        if zero:
            w = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
        else:
            w = gaussian_init(rng, (d_in, d_out), fan_in=d_in)
        b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        return out + self.b if self.b is not None else out

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class LayerNorm:
    def __init__(self, gain: Tensor, bias: Tensor):
        self.gain = gain
        self.bias = bias

    @classmethod
    def init(cls, d: int) -> "LayerNorm":
        return cls(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class FeedForward:
    """Linear -> SiLU -> Linear."""

    def __init__(self, lin1: Linear, lin2: Linear):
        self.lin1 = lin1
        self.lin2 = lin2

    @classmethod
    def init(cls, rng, d: int, hidden: int, d_out: int | None = None) -> "FeedForward":
        return cls(Linear.init(rng, d, hidden), Linear.init(rng, hidden, d_out if d_out is not None else d))

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(silu(self.lin1(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.lin1.params(f"{prefix}.lin1"), **self.lin2.params(f"{prefix}.lin2")}

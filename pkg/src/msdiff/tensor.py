"""Dense f64 tensors with reverse-mode automatic differentiation.

Values are stored as row-major numpy arrays. Every completed operation
checks its output for NaN/Inf and raises NonFiniteError instead of
propagating silent garbage. Attention masks are plain numpy arrays whose
entries are 0.0 or the MASK_EXCLUDE sentinel; excluded positions are
skipped before exponentiation, never fed through exp.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

MASK_EXCLUDE = float("-inf")

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    """A dense f64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op="tensor"):
        arr = np.asarray(data, dtype=np.float64, order="C")
        _check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # ---- basic introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape))

    # ---- autodiff machinery ----

    def backward(self) -> None:
        """Populate .grad on every tensor this scalar loss depends on."""
        if self.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- arithmetic ----

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(-self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    # ---- shape ops ----

    def transpose(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose expects a 2-d tensor, got shape {self.shape}")
        return permute(self, (1, 0))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # ---- reductions ----

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def _wrap(data, requires: bool, parents, backward, op) -> Tensor:
    if not _grad_enabled or not requires:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_const(other, like: Tensor) -> np.ndarray:
    arr = np.asarray(other, dtype=np.float64)
    try:
        out_shape = np.broadcast_shapes(like.shape, arr.shape)
    except ValueError:
        raise ShapeError(f"constant operand shape {arr.shape} does not broadcast with {like.shape}")
    if out_shape != like.shape:
        raise ShapeError(f"constant operand shape {arr.shape} would expand tensor shape {like.shape}")
    return arr


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_const(b, a)
        out = a.data + c

        def bw(g):
            _accumulate(a, g)

        return _wrap(out, a.requires_grad, (a,), bw, "add")
    if a.shape == b.shape:
        out = a.data + b.data

        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _wrap(out, a.requires_grad or b.requires_grad, (a, b), bw, "add")
    # row-broadcast bias: (n, d) + (d,) or (1, d)
    if a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        out = a.data + b.data.reshape(1, -1)

        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0).reshape(b.shape))

        return _wrap(out, a.requires_grad or b.requires_grad, (a, b), bw, "add")
    if b.shape == ():
        out = a.data + b.data

        def bw(g):
            _accumulate(a, g)
            _accumulate(b, np.asarray(g.sum()))

        return _wrap(out, a.requires_grad or b.requires_grad, (a, b), bw, "add")
    if a.shape == ():
        return add(b, a)
    raise ShapeError(f"add got incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if isinstance(b, (int, float)):
            return scale(a, float(b))
        c = _as_const(b, a)
        out = a.data * c

        def bw(g):
            _accumulate(a, g * c)

        return _wrap(out, a.requires_grad, (a,), bw, "mul")
    if a.shape == b.shape:
        out = a.data * b.data

        def bw(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        return _wrap(out, a.requires_grad or b.requires_grad, (a, b), bw, "mul")
    if b.shape == ():
        out = a.data * b.data

        def bw(g):
            _accumulate(a, g * b.data)
            _accumulate(b, np.asarray((g * a.data).sum()))

        return _wrap(out, a.requires_grad or b.requires_grad, (a, b), bw, "mul")
    if a.shape == ():
        return mul(b, a)
    raise ShapeError(f"mul got incompatible shapes {a.shape} and {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bw(g):
        _accumulate(a, g * c)

    return _wrap(out, a.requires_grad, (a,), bw, "scale")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    if b.shape not in ((), a.shape):
        raise ShapeError(f"div got incompatible shapes {a.shape} and {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        _accumulate(a, g / b.data)
        gb = -g * a.data / (b.data * b.data)
        _accumulate(b, np.asarray(gb.sum()) if b.shape == () else gb)

    return _wrap(out, a.requires_grad or b.requires_grad, (a, b), bw, "div")


def power(a: Tensor, exponent: int) -> Tensor:
    if not isinstance(exponent, int) or exponent < 1:
        raise ContractError(f"power expects a positive integer exponent, got {exponent!r}")
    out = a.data ** exponent

    def bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _wrap(out, a.requires_grad, (a,), bw, "power")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul got incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _wrap(out, a.requires_grad or b.requires_grad, (a, b), bw, "matmul")


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} do not match tensor of rank {a.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def bw(g):
        _accumulate(a, np.transpose(g, inverse))

    return _wrap(out, a.requires_grad, (a,), bw, "permute")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _wrap(out, a.requires_grad, (a,), bw, "reshape")


def index(a: Tensor, key) -> Tensor:
    """Basic slicing (no steps); gradients flow back into the sliced region."""
    if isinstance(key, slice):
        key = (key,)
    if not isinstance(key, tuple) or not all(isinstance(k, slice) and k.step is None for k in key):
        raise ContractError("tensor indexing supports only step-free slices")
    out = a.data[key].copy()

    def bw(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _wrap(out, a.requires_grad, (a,), bw, "index")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            _accumulate(t, g[tuple(sl)])

    requires = any(t.requires_grad for t in tensors)
    return _wrap(out, requires, tuple(tensors), bw, "concat")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding); gradients scatter-add back into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows expects (V, d) table and 1-d ids, got {table.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"gather_rows id out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _wrap(out, table.requires_grad, (table,), bw, "gather_rows")


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _wrap(out, a.requires_grad, (a,), bw, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    out = np.asarray(a.data.mean())

    def bw(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape).copy())

    return _wrap(out, a.requires_grad, (a,), bw, "mean")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def bw(g):
        _accumulate(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _wrap(out, a.requires_grad, (a,), bw, "silu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(bias, g.sum(axis=lead))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        dxhat = g * gain.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        _accumulate(x, dx)

    requires = x.requires_grad or gain.requires_grad or bias.requires_grad
    return _wrap(out, requires, (x, gain, bias), bw, "layer_norm")


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Softmax over the last axis with additive-exclusion masking.

    mask entries must be 0.0 (keep) or MASK_EXCLUDE (drop); excluded
    positions are skipped before exponentiation and come out exactly 0.
    Rows with every position excluded produce all zeros and are flagged
    in the returned boolean array rather than turning into NaN.
    """
    if mask is not None:
        if isinstance(mask, Tensor):
            raise ContractError("mask must be a plain array of 0/MASK_EXCLUDE sentinels, not a Tensor")
        mask = np.asarray(mask, dtype=np.float64)
        if not np.all((mask == 0.0) | np.isneginf(mask)):
            raise ContractError("mask entries must be 0.0 or the MASK_EXCLUDE sentinel")
        try:
            allowed = np.broadcast_to(mask == 0.0, logits.shape)
        except ValueError:
            raise ShapeError(f"mask shape {mask.shape} does not broadcast to logits shape {logits.shape}")
    else:
        allowed = np.ones(logits.shape, dtype=bool)

    neg = np.where(allowed, logits.data, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    degenerate = ~np.isfinite(rowmax)
    rowmax = np.where(degenerate, 0.0, rowmax)
    e = np.zeros_like(logits.data)
    e[allowed] = np.exp((logits.data - rowmax)[allowed])
    total = e.sum(axis=-1, keepdims=True)
    p = e / np.where(total == 0.0, 1.0, total)

    def bw(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(logits, p * (g - dot))

    out = _wrap(p, logits.requires_grad, (logits,), bw, "masked_softmax")
    return out, degenerate.reshape(logits.shape[:-1])


def softmax(logits: Tensor) -> Tensor:
    out, _ = masked_softmax(logits, None)
    return out


# ---- image-shaped ops (H, W, C) ----


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 same-padding 2-d convolution on an (H, W, Cin) tensor."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (H,W,Cin) input and (kh,kw,Cin,Cout) kernel, got {x.shape} and {w.shape}")
    h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * wd, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(h, wd, cout)

    def bw(g):
        gmat = g.reshape(h * wd, cout)
        if b is not None:
            _accumulate(b, gmat.sum(axis=0))
        _accumulate(w, (cols.T @ gmat).reshape(w.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat.T).reshape(h, wd, kh, kw, cin)
            acc = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    acc[u:u + h, v:v + wd] += dcols[:, :, u, v, :]
            _accumulate(x, acc[ph:ph + h, pw:pw + wd])

    parents = (x, w) if b is None else (x, w, b)
    requires = any(p.requires_grad for p in parents)
    return _wrap(out, requires, parents, bw, "conv2d")


def avg_pool2x2(x: Tensor) -> Tensor:
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial dims, got {x.shape}")
    out = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
        _accumulate(x, up * 0.25)

    return _wrap(out, x.requires_grad, (x,), bw, "avg_pool2x2")


def upsample2x2(x: Tensor) -> Tensor:
    h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def bw(g):
        _accumulate(x, g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))

    return _wrap(out, x.requires_grad, (x,), bw, "upsample2x2")

"""Minimal reverse-mode automatic differentiation for per-point features.

A Tensor wraps a dense (points x channels) value matrix plus a gradient
accumulator.  Ops record backward closures micrograd-style; calling
``backward()`` on a scalar walks the graph in reverse topological order.
Only the handful of ops the occupancy network needs exist here.

Reductions run in a fixed order (offset-major, then point order), so a
forward pass is bit-reproducible for identical inputs and parameters.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError

# Probability clamp applied inside the cross-entropy loss.
BCE_EPS = 2.0 ** -20

_LN2 = float(np.log(2.0))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (coding passes need no gradients)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev: tuple = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.ndim != 0:
            raise ShapeError("backward() requires a scalar root")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """A named leaf tensor with a persistent gradient accumulator."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(a.data * c, (a,), backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-point dense layer: x @ W + b."""
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"affine expects {weight.data.shape[0]} input channels, "
            f"got {x.data.shape[1]}"
        )

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _make(np.maximum(x.data, 0), (x,), backward)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_values(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.data.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat row counts differ: {sorted(rows)}")
    widths = [p.data.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, backward)


def broadcast_row(table: Tensor, index: int, num_points: int) -> Tensor:
    """Tile one row of a (rows x channels) table across all points."""
    rows = table.data.shape[0]
    if not 0 <= index < rows:
        raise IndexError(f"row {index} out of range for table with {rows} rows")

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            table.grad[index] += g.sum(axis=0)

    data = np.repeat(table.data[index : index + 1], num_points, axis=0)
    return _make(data, (table,), backward)


def sparse_conv(x: Tensor, weight: Tensor, bias: Tensor, pairs) -> Tensor:
    """Submanifold sparse convolution via precomputed gather lists.

    ``weight`` is (num_offsets, c_in, c_out); ``pairs[k]`` gives the
    (out_rows, in_rows) index arrays for kernel offset k.  Offsets are
    accumulated in fixed order, points in row order.
    """
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"conv expects {weight.data.shape[1]} input channels, "
            f"got {x.data.shape[1]}"
        )
    if len(pairs) != weight.data.shape[0]:
        raise ShapeError("kernel map does not match weight offset count")
    n = x.data.shape[0]
    c_out = weight.data.shape[2]
    out = np.empty((n, c_out), dtype=x.data.dtype)
    out[:] = bias.data
    for k in range(weight.data.shape[0]):
        out_rows, in_rows = pairs[k]
        if out_rows.shape[0] == 0:
            continue
        if out_rows.shape[0] == n:
            out += x.data[in_rows] @ weight.data[k]
        else:
            out[out_rows] += x.data[in_rows] @ weight.data[k]

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        need_x = x.requires_grad
        if need_x and x.grad is None:
            x.grad = np.zeros_like(x.data)
        for k in range(weight.data.shape[0]):
            out_rows, in_rows = pairs[k]
            if out_rows.shape[0] == 0:
                continue
            gk = g[out_rows]
            if weight.requires_grad:
                if weight.grad is None:
                    weight.grad = np.zeros_like(weight.data)
                weight.grad[k] += x.data[in_rows].T @ gk
            if need_x:
                np.add.at(x.grad, in_rows, gk @ weight.data[k].T)

    return _make(out, (x, weight, bias), backward)


def bce_bits(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy in bits (base-2 logs), summed over points.

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS] before the log, so
    the result is finite for any input; the clamp region passes no gradient.
    """
    t = np.asarray(targets, dtype=probs.data.dtype)
    if t.shape != probs.data.shape:
        raise ShapeError(f"bce shape mismatch: {t.shape} vs {probs.data.shape}")
    p = np.clip(probs.data, BCE_EPS, 1.0 - BCE_EPS)
    bits = -(t * np.log2(p) + (1.0 - t) * np.log2(1.0 - p)).sum()

    def backward(g):
        if probs.requires_grad:
            inside = (probs.data > BCE_EPS) & (probs.data < 1.0 - BCE_EPS)
            dp = (-(t / p) + (1.0 - t) / (1.0 - p)) / _LN2
            probs._accumulate(g * dp * inside)

    return _make(np.asarray(bits, dtype=probs.data.dtype), (probs,), backward)


def square_sum(x: Tensor) -> Tensor:
    """Sum of squared entries (the L2 penalty building block)."""
    val = np.asarray((x.data * x.data).sum(), dtype=x.data.dtype)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * 2.0 * x.data)

    return _make(val, (x,), backward)


# ---------------------------------------------------------------------------
# Layers


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class AffineLayer:
    """One dense layer with named weight and bias parameters."""

    def __init__(self, rng, name: str, c_in: int, c_out: int, dtype=np.float32):
        self.weight = Parameter(
            f"{name}.weight", glorot_uniform(rng, (c_in, c_out), c_in, c_out, dtype)
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)

    def parameters(self) -> list:
        return [self.weight, self.bias]


class Mlp:
    """Per-point affine -> ReLU -> affine chain."""

    def __init__(self, rng, name: str, c_in: int, c_hidden: int, c_out: int,
                 dtype=np.float32):
        self.inner = AffineLayer(rng, f"{name}.inner", c_in, c_hidden, dtype)
        self.outer = AffineLayer(rng, f"{name}.outer", c_hidden, c_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(relu(self.inner(x)))

    def parameters(self) -> list:
        return self.inner.parameters() + self.outer.parameters()


class SparseConvLayer:
    """Submanifold sparse convolution with kernel size 1 or 3.

    The weight holds one (c_in x c_out) matrix per kernel offset in fixed
    lexicographic order; the output coordinate set equals the input's.
    """

    def __init__(self, rng, name: str, c_in: int, c_out: int, kernel_size: int,
                 dtype=np.float32):
        if kernel_size not in (1, 3):
            raise ValueError("kernel size must be 1 or 3")
        k = kernel_size ** 3
        self.kernel_size = kernel_size
        self.weight = Parameter(
            f"{name}.weight",
            glorot_uniform(rng, (k, c_in, c_out), c_in * k, c_out * k, dtype),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor, voxels) -> Tensor:
        return sparse_conv(x, self.weight, self.bias, voxels.kernel_pairs(self.kernel_size))

    def parameters(self) -> list:
        return [self.weight, self.bias]


class ScaleEmbedding:
    """Learnable (num_scales x channels) table broadcast per point."""

    def __init__(self, rng, name: str, num_scales: int, channels: int,
                 dtype=np.float32):
        self.table = Parameter(
            f"{name}.table",
            glorot_uniform(rng, (num_scales, channels), num_scales, channels, dtype),
        )

    def __call__(self, index: int, num_points: int) -> Tensor:
        return broadcast_row(self.table, index, num_points)

    def parameters(self) -> list:
        return [self.table]


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Adam with a step-decayed learning rate and optional L2 weight decay.

    lr(t) = max(lr_min, lr0 * decay^(t // decay_every)), with t counting
    completed optimizer steps.
    """

    def __init__(self, params: Iterable[Parameter], lr0: float = 0.01,
                 lr_min: float = 0.0004, decay: float = 0.992,
                 decay_every: int = 32, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = sorted(params, key=lambda p: p.name)
        self.lr0 = lr0
        self.lr_min = lr_min
        self.decay = decay
        self.decay_every = decay_every
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def lr(self) -> float:
        return max(self.lr_min, self.lr0 * self.decay ** (self.steps // self.decay_every))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def step(self) -> None:
        lr = self.lr()
        self.steps += 1
        correct1 = 1.0 - self.beta1 ** self.steps
        correct2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data -= lr * update

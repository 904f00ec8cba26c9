"""A small reverse-mode autodiff engine over (batch, channels, length) arrays.

Tensors hold numpy arrays. Each op records its parents and a closure that maps
the output gradient to parent gradients; ``Tensor.backward`` walks the graph in
reverse topological order, visiting every node once. The op vocabulary is
deliberately closed: exactly what the watermark networks, losses and the
distortion layer need.

Arrays are usually 3-D ``(batch, channels, length)``; a 2-D ``(channels,
length)`` tensor works for every op that does not mix batch items.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "tensor",
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "add_scalar",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "log",
    "clamp",
    "concat_channels",
    "mean_over_length",
    "block_mean",
    "mean",
    "sum_all",
    "mse",
    "conv1d",
    "linear_map",
    "straight_through",
    "take_along_length",
    "conv_init",
    "Adam",
    "adam_step",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[index] = g
            return (full,)

        return Tensor.from_op(self.data[index], (self,), backward, "slice")

    def backward(self, grad: np.ndarray | None = None, retain_intermediate: bool = False) -> int:
        """Accumulate d(self)/d(t) into ``t.grad`` for every leaf tensor requiring grad.

        Intermediate results only keep their gradient with ``retain_intermediate``.
        Returns the number of graph nodes visited.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar tensor, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or retain_intermediate:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{node._op} produced grad of shape {pg.shape} for parent {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return len(order)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def Parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "mul_scalar")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, a.data.dtype.type(1), a.data.dtype.type(slope))
    return Tensor.from_op(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value; clamp the argument first")
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return Tensor.from_op(out, (a,), lambda g: (np.where(inside, g, 0),), "clamp")


# shape & reduction -----------------------------------------------------------

def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    sizes = [t.shape[-2] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-2)

    def backward(g):
        return tuple(np.split(g, bounds, axis=-2))

    return Tensor.from_op(out, tuple(tensors), backward, "concat")


def mean_over_length(a: Tensor) -> Tensor:
    n = a.shape[-1]
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return Tensor.from_op(a.data.mean(axis=-1, keepdims=True), (a,), backward, "mean_len")


def block_mean(a: Tensor, blocks: int) -> Tensor:
    """Mean over ``blocks`` contiguous, equal-size blocks of the length axis."""
    n = a.shape[-1]
    if n % blocks:
        raise ValueError(f"length {n} not divisible into {blocks} blocks")
    size = n // blocks
    shape = a.shape
    out = a.data.reshape(shape[:-1] + (blocks, size)).mean(axis=-1)

    def backward(g):
        return (np.repeat(g / size, size, axis=-1).reshape(shape),)

    return Tensor.from_op(out, (a,), backward, "block_mean")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return Tensor.from_op(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean"
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor.from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),), "sum")


def mse(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return Tensor.from_op(np.asarray(np.mean(diff * diff)), (a, b), backward, "mse")


# convolution ---------------------------------------------------------------

def _tap_rows(flat: np.ndarray, j: int, stride: int, rows: int) -> np.ndarray:
    return flat[j : j + stride * (rows - 1) + 1 : stride]


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with 'same' zero padding (K-1)/2; output length ceil(N/stride).

    The padded batch is laid out channels-last as one long sequence, so each
    kernel tap is a plain row slice of it and contributes one matrix product;
    positions straddling two batch items are computed and discarded.
    Gradients are only formed for inputs that require them.
    """
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    b, c_in, n = xd.shape
    c_out, c_w, k = weight.shape
    if c_w != c_in:
        raise ValueError(f"conv1d: input has {c_in} channels, kernel expects {c_w}")
    if k % 2 == 0:
        raise ValueError(f"conv1d: kernel size must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    pad = (k - 1) // 2
    m = (n - 1) // stride + 1
    per_item = -(-(n + 2 * pad) // stride) * stride  # padded length, a multiple of the stride
    slots = per_item // stride  # output rows per batch item
    rows = (b * per_item - k) // stride + 1
    flat = np.zeros((b, per_item, c_in), dtype=xd.dtype)
    flat[:, pad : pad + n, :] = xd.transpose(0, 2, 1)
    flat = flat.reshape(b * per_item, c_in)
    # contiguous tap matrices keep every product on the BLAS path
    taps = np.ascontiguousarray(weight.data.transpose(2, 1, 0))  # (K, C_in, C_out)

    out = np.zeros((b * slots, c_out), dtype=np.result_type(xd, weight.data))
    acc = out[:rows]
    for j in range(k):
        acc += _tap_rows(flat, j, stride, rows) @ taps[j]
    if bias is not None:
        acc += bias.data
    y = np.ascontiguousarray(out.reshape(b, slots, c_out)[:, :m, :].transpose(0, 2, 1))
    if squeeze:
        y = y[0]

    def backward(g):
        g3 = g[None] if squeeze else g
        g_flat = np.zeros((b, slots, c_out), dtype=g3.dtype)
        g_flat[:, :m, :] = g3.transpose(0, 2, 1)
        g_rows = g_flat.reshape(b * slots, c_out)[:rows]
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=weight.data.dtype)
            for j in range(k):
                gw[:, :, j] = g_rows.T @ _tap_rows(flat, j, stride, rows)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            taps_t = np.ascontiguousarray(weight.data.transpose(2, 0, 1))  # (K, C_out, C_in)
            for j in range(k):
                _tap_rows(gflat, j, stride, rows)[...] += g_rows @ taps_t[j]
            gx = np.ascontiguousarray(gflat.reshape(b, per_item, c_in)[:, pad : pad + n, :].transpose(0, 2, 1))
            if squeeze:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(y, parents, backward, "conv1d")


def conv_init(c_out: int, c_in: int, k: int, rng: np.random.Generator, dtype=np.float32, name: str = "conv"):
    """Kernel and bias drawn uniformly from +-1/sqrt(c_in*k)."""
    bound = 1.0 / np.sqrt(c_in * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(c_out,)).astype(dtype)
    return Parameter(w, name=f"{name}.weight"), Parameter(b, name=f"{name}.bias")


# generic linear / surrogate ops ----------------------------------------------

def linear_map(x: Tensor, forward: Callable, adjoint: Callable, name: str = "linear") -> Tensor:
    """Apply a fixed linear map; the adjoint supplies the backward pass."""
    return Tensor.from_op(forward(x.data), (x,), lambda g: (adjoint(g),), name)


def straight_through(x: Tensor, fn: Callable, name: str = "straight_through") -> Tensor:
    """Apply ``fn`` forward and pass gradients through unchanged."""
    out = np.asarray(fn(x.data), dtype=x.dtype)
    if out.shape != x.shape:
        raise ValueError("straight_through requires a shape-preserving function")
    return Tensor.from_op(out, (x,), lambda g: (g,), name)


def take_along_length(x: Tensor, index: np.ndarray, name: str = "take") -> Tensor:
    """out[..., i] = x[..., index[..., i]]; gradient scatters back to the chosen elements."""
    out = np.take_along_axis(x.data, index, axis=-1)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        flat = full.reshape(-1, shape[-1])
        idx = index.reshape(-1, index.shape[-1])
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (np.broadcast_to(rows, idx.shape), idx), g.reshape(idx.shape))
        return (full,)

    return Tensor.from_op(out, (x,), backward, name)


# optimizer -------------------------------------------------------------------

class Adam:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam) -> None:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: parameter/gradient/state count mismatch")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for {p.name}: {g.shape} vs {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)

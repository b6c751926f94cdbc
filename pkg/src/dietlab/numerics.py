"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure accumulating gradients into them.  :func:`custom_grad` lets a caller
pair an arbitrary forward map with its own backward rule (used for the
straight-through binarizer).

Elementwise ops follow numpy broadcasting; the backward pass sums the
gradient back down to each operand's shape.  ``matmul`` accepts leading batch
dimensions so a batch of per-user weight matrices can be applied at once.

Randomness goes through :class:`Rng`, a thin wrapper over numpy's PCG64 bit
generator (O'Neill's permuted congruential generator, 128-bit state), which
produces the same stream for the same seed on every platform.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = _op
        self._parents = _parents
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def _accumulate(self, g):
        # never in-place: upstream arrays may be shared between parents
        if self.grad is None:
            self.grad = np.asarray(g, dtype=DTYPE)
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # NaN/Inf anywhere propagates into the sum
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        raise NumericError(f"non-finite value produced by {op}")


def _make(data, parents, op, backward) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- primitive ops -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.shape))

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy semantics for 2-D and batched (..., m, k) operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(out):
        x._accumulate(out.grad * (1.0 - y * y))

    return _make(y, (x,), "tanh", backward)


def _sigmoid(v):
    # tanh form: stable at both tails and cheaper than exp/logaddexp
    return 0.5 + 0.5 * np.tanh(0.5 * v)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def backward(out):
        x._accumulate(out.grad * y * (1.0 - y))

    return _make(y, (x,), "sigmoid", backward)


def log_sigmoid(x) -> Tensor:
    """``log(sigmoid(x))`` computed without overflow."""
    x = as_tensor(x)

    def backward(out):
        x._accumulate(out.grad * _sigmoid(-x.data))

    return _make(-np.logaddexp(0.0, -x.data), (x,), "log_sigmoid", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)

    def backward(out):
        x._accumulate(out.grad * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), "relu", backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def backward(out):
        x._accumulate(out.grad * y)

    return _make(y, (x,), "exp", backward)


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(out):
        x._accumulate(out.grad / x.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _make(y, (x,), "log", backward)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)

    def backward(out):
        x._accumulate(out.grad * p * x.data ** (p - 1))

    with np.errstate(divide="ignore", invalid="ignore"):
        y = x.data ** p
    return _make(y, (x,), "power", backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (rows of a matrix by default)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(out):
        g = out.grad
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), "softmax", backward)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "reduce_sum", backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(x, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)

    def backward(out):
        g = np.zeros_like(x.data)
        np.put_along_axis(g, arg, np.expand_dims(out.grad, axis), axis=axis)
        x._accumulate(g)

    return _make(np.take_along_axis(x.data, arg, axis=axis).squeeze(axis), (x,), "reduce_max", backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(out):
        x._accumulate(out.grad.reshape(x.shape))

    return _make(y, (x,), "reshape", backward)


def transpose(x, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    inverse = np.argsort(axes)

    def backward(out):
        x._accumulate(np.transpose(out.grad, inverse))

    return _make(np.transpose(x.data, axes), (x,), "transpose", backward)


def gather(table, index) -> Tensor:
    """Embedding lookup ``table[index]``; negative ids read an all-zero row."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("gather: table must be 2-D")
    if idx.size and idx.max() >= table.shape[0]:
        raise IndexError(f"gather: id {int(idx.max())} outside table of {table.shape[0]} rows")
    pad = idx < 0
    safe = np.where(pad, 0, idx)
    y = table.data[safe]
    y[pad] = 0.0

    def backward(out):
        g = np.zeros_like(table.data)
        np.add.at(g, safe[~pad], out.grad[~pad])
        table._accumulate(g)

    return _make(y, (table,), "gather", backward)


def concat(xs: Iterable, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(out):
        for x, g in zip(xs, np.split(out.grad, bounds, axis=axis)):
            if x.requires_grad:
                x._accumulate(g)

    return _make(y, tuple(xs), "concat", backward)


def slice_(x, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)

    def backward(out):
        g = np.zeros_like(x.data)
        g[idx] += out.grad
        x._accumulate(g)

    return _make(np.array(x.data[idx]), (x,), "slice", backward)


def custom_grad(x, forward: Callable[[np.ndarray], np.ndarray],
                backward: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> Tensor:
    """Node computing ``forward(x)`` whose gradient is ``backward(upstream, x, y)``.

    ``backward=lambda g, x, y: g`` is the straight-through estimator.
    """
    x = as_tensor(x)
    y = np.asarray(forward(x.data), dtype=DTYPE)

    def _bw(out):
        x._accumulate(backward(out.grad, x.data, y))

    return _make(y, (x,), "custom_grad", _bw)


def straight_through(x, forward: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    return custom_grad(x, forward, lambda g, _x, _y: g)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# --- graphs ------------------------------------------------------------------

def _topo(outputs: Iterable[Tensor]) -> list[Tensor]:
    order, seen = [], set()
    stack = [(t, False) for t in outputs]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if id(p) not in seen)
    return order


def backward(outputs: Tensor | Mapping[str, Tensor] | list, seeds=None) -> None:
    """Reverse-mode sweep from ``outputs`` seeded with ``seeds`` (ones for a scalar)."""
    if isinstance(outputs, Tensor):
        outputs = [outputs]
        seeds = [np.ones_like(outputs[0].data) if seeds is None else seeds]
    for out, seed in zip(outputs, seeds):
        seed = np.asarray(seed, dtype=DTYPE)
        if seed.shape != out.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != output shape {out.shape}")
        out._accumulate(seed)
    for node in reversed(_topo(outputs)):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


class Graph:
    """A fixed architecture: ``build(**leaves) -> {name: Tensor}``.

    ``inputs`` name the per-call bindings; ``params`` are the parameter
    leaves gradients are reported for.  The same graph is re-bound for every
    batch by :func:`forward_eval`.
    """

    def __init__(self, build: Callable[..., Mapping[str, Tensor]], inputs: Iterable[str], params: Mapping[str, np.ndarray]):
        self.build = build
        self.inputs = tuple(inputs)
        self.params = dict(params)


class Evaluation(dict):
    """Outputs of one binding; keeps the leaves for :func:`backward_pass`."""

    def __init__(self, outputs, leaves):
        super().__init__((k, v.data) for k, v in outputs.items())
        self.nodes = dict(outputs)
        self.leaves = leaves


def forward_eval(graph: Graph, inputs: Mapping[str, np.ndarray]) -> Evaluation:
    missing = [n for n in graph.inputs if n not in inputs]
    if missing:
        raise KeyError(f"unbound inputs: {missing}")
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in graph.params.items()}
    bound = {k: (v if isinstance(v, Tensor) else Tensor(v, name=k)) for k, v in inputs.items()}
    outputs = graph.build(**bound, **leaves)
    return Evaluation(outputs, leaves)


def backward_pass(ev: Evaluation, seed_grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    unknown = [k for k in seed_grads if k not in ev.nodes]
    if unknown:
        raise KeyError(f"no output named {unknown}")
    for leaf in ev.leaves.values():
        leaf.grad = None
    names = list(seed_grads)
    backward([ev.nodes[n] for n in names], [seed_grads[n] for n in names])
    return {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in ev.leaves.items()}


# --- randomness & init -------------------------------------------------------

class Rng:
    """Seeded PCG64 stream; ``child(key)`` derives an independent sub-stream."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, key: int) -> "Rng":
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        return Rng(int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1)))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.gen.standard_normal(shape) * std

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)


def fans(shape) -> tuple[int, int]:
    """(fan_in, fan_out) for a ``(d_out, d_in)`` matrix or ``(out, in, *kernel)`` conv weight."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ShapeError("xavier init needs a 2-D or conv-shaped tensor")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_xavier_normal(shape, rng: Rng) -> np.ndarray:
    if any(int(s) <= 0 for s in shape):
        raise ShapeError(f"zero extent in shape {tuple(shape)}")
    fan_in, fan_out = fans(shape)
    return rng.normal(tuple(shape), std=np.sqrt(2.0 / (fan_in + fan_out)))


def init_bias_uniform(weight_shape, rng: Rng) -> np.ndarray:
    """Bias for a layer of ``weight_shape``: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), one per output."""
    fan_in, _ = fans(weight_shape)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (int(weight_shape[0]),))

"""Tape-based reverse-mode differentiation over float64 arrays.

Every op works on arrays of shape ``(..., rows, cols)`` so a whole stack of
perturbed parameter sets can be pushed through one forward pass; gradients
are only ever requested for unbatched scalar losses.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor
from .errors import NumericError, ShapeError, StateError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_float(value) -> np.ndarray:
    """float64 array, except that extended-precision input is kept as is."""
    arr = np.asarray(value)
    if arr.dtype == np.longdouble and np.longdouble is not np.float64:
        return arr
    return arr.astype(np.float64, copy=False)


def _broadcast_lead(arrays):
    """Broadcast leading (batch) axes only, keeping each matrix shape."""
    if len({a.shape[:-2] for a in arrays}) == 1:
        return arrays
    lead = np.broadcast_shapes(*[a.shape[:-2] for a in arrays])
    return [np.broadcast_to(a, lead + a.shape[-2:]) for a in arrays]


class Node:
    __slots__ = ("value", "grad", "parents", "kind", "name", "_backward")

    def __init__(self, value, parents=(), kind="leaf", name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.kind = kind
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.value.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"


class Tape:
    """Records operations in execution order; ``backward`` replays them in
    reverse."""

    OPS = (
        "matmul", "add", "scale", "mul", "concat_cols", "row_softmax", "tanh",
        "sigmoid", "relu", "layer_norm", "dropout", "transpose", "mse", "sum",
        "rows", "stack_rows", "row_normalize",
    )

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: "OrderedDict[str, Node]" = OrderedDict()
        self._backward_done = False

    # -- construction -----------------------------------------------------

    def _push(self, value, parents, kind, backward=None) -> Node:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite output from {kind}")
        node = Node(value, tuple(parents), kind)
        node._backward = backward
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None) -> Node:
        value = as_float(value)
        node = self._push(value, (), "leaf")
        node.name = name
        return node

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise StateError(f"parameter {name!r} registered twice")
        node = self.leaf(value, name=name)
        self.params[name] = node
        return node

    def record(self, kind: str, *inputs, **attrs):
        """Generic entry point: ``record("matmul", a, b)``."""
        if kind not in self.OPS:
            raise ValueError(f"unknown op {kind!r}")
        return getattr(self, kind)(*inputs, **attrs)

    # -- ops --------------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: {a.shape} x {b.shape}")

        def backward(g):
            a.accumulate(np.matmul(g, np.swapaxes(b.value, -1, -2)))
            b.accumulate(np.matmul(np.swapaxes(a.value, -1, -2), g))

        return self._push(np.matmul(a.value, b.value), (a, b), "matmul", backward)

    def add(self, a: Node, b: Node) -> Node:
        try:
            value = a.value + b.value
        except ValueError as exc:
            raise ShapeError(f"add: {a.shape} + {b.shape}") from exc

        def backward(g):
            a.accumulate(g)
            b.accumulate(g)

        return self._push(value, (a, b), "add", backward)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)

        def backward(g):
            a.accumulate(c * g)

        return self._push(c * a.value, (a,), "scale", backward)

    def mul(self, a: Node, b: Node) -> Node:
        try:
            value = a.value * b.value
        except ValueError as exc:
            raise ShapeError(f"mul: {a.shape} * {b.shape}") from exc

        def backward(g):
            a.accumulate(g * b.value)
            b.accumulate(g * a.value)

        return self._push(value, (a, b), "mul", backward)

    def concat_cols(self, *xs: Node) -> Node:
        if len({x.shape[-2] for x in xs}) != 1:
            raise ShapeError("concat_cols: row counts differ")
        widths = [x.shape[-1] for x in xs]
        value = np.concatenate(_broadcast_lead([x.value for x in xs]), axis=-1)
        edges = np.cumsum([0] + widths)

        def backward(g):
            for x, lo, hi in zip(xs, edges[:-1], edges[1:]):
                x.accumulate(g[..., lo:hi])

        return self._push(value, xs, "concat_cols", backward)

    def row_softmax(self, x: Node) -> Node:
        p = tensor.row_softmax(x.value)

        def backward(g):
            x.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

        return self._push(p, (x,), "row_softmax", backward)

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)

        def backward(g):
            x.accumulate(g * (1.0 - y * y))

        return self._push(y, (x,), "tanh", backward)

    def sigmoid(self, x: Node) -> Node:
        y = 0.5 * (1.0 + np.tanh(0.5 * x.value))

        def backward(g):
            x.accumulate(g * y * (1.0 - y))

        return self._push(y, (x,), "sigmoid", backward)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0

        def backward(g):
            x.accumulate(g * mask)

        return self._push(x.value * mask, (x,), "relu", backward)

    def layer_norm(self, x: Node, gain: Node, bias: Node,
                   eps: float = tensor.DEFAULT_LN_EPS) -> Node:
        if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
            raise ShapeError("layer_norm: gain/bias width must equal x.cols")
        xc = x.value - x.value.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        value = gain.value * xhat + bias.value

        def backward(g):
            gain.accumulate(g * xhat)
            bias.accumulate(g)
            dxhat = g * gain.value
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            x.accumulate(dx)

        return self._push(value, (x, gain, bias), "layer_norm", backward)

    def dropout(self, x: Node, rate: float, rng=None) -> Node:
        """Inverted dropout; ``rate == 0`` returns ``x`` unchanged."""
        if rate <= 0.0:
            return x
        if not rate < 1.0:
            raise ValueError("dropout rate must be < 1")
        if rng is None:
            raise ValueError("dropout with rate > 0 needs an rng")
        keep = (rng.random(x.shape[-2:]) >= rate) / (1.0 - rate)

        def backward(g):
            x.accumulate(g * keep)

        return self._push(x.value * keep, (x,), "dropout", backward)

    def transpose(self, x: Node) -> Node:
        def backward(g):
            x.accumulate(np.swapaxes(g, -1, -2))

        return self._push(np.swapaxes(x.value, -1, -2), (x,), "transpose",
                          backward)

    def sum(self, x: Node) -> Node:
        def backward(g):
            x.accumulate(np.broadcast_to(g, x.shape))

        return self._push(x.value.sum(axis=(-2, -1), keepdims=True), (x,),
                          "sum", backward)

    def mse(self, pred: Node, target: Node) -> Node:
        if pred.shape[-2:] != target.shape[-2:]:
            raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
        n = pred.shape[-1] * pred.shape[-2]
        diff = pred.value - target.value
        value = (diff * diff).sum(axis=(-2, -1), keepdims=True) / n

        def backward(g):
            pred.accumulate(g * (2.0 / n) * diff)
            target.accumulate(-g * (2.0 / n) * diff)

        return self._push(value, (pred, target), "mse", backward)

    def row_normalize(self, x: Node) -> Node:
        """Divide each row by its sum (rows must have nonzero sums)."""
        s = x.value.sum(axis=-1, keepdims=True)
        y = x.value / s

        def backward(g):
            x.accumulate((g - (g * y).sum(axis=-1, keepdims=True)) / s)

        return self._push(y, (x,), "row_normalize", backward)

    def rows(self, x: Node) -> list[Node]:
        """Split into single-row nodes."""
        out = []
        for t in range(x.shape[-2]):
            def backward(g, t=t):
                if x.grad is None:
                    x.grad = np.zeros_like(x.value)
                x.grad[..., t:t + 1, :] += _unbroadcast(
                    g, x.shape[:-2] + (1, x.shape[-1]))

            out.append(self._push(x.value[..., t:t + 1, :], (x,), "rows",
                                  backward))
        return out

    def stack_rows(self, xs: list[Node]) -> Node:
        if len({x.shape[-1] for x in xs}) != 1:
            raise ShapeError("stack_rows: widths differ")
        value = np.concatenate(_broadcast_lead([x.value for x in xs]), axis=-2)
        edges = np.cumsum([0] + [x.shape[-2] for x in xs])

        def backward(g):
            for x, lo, hi in zip(xs, edges[:-1], edges[1:]):
                x.accumulate(g[..., lo:hi, :])

        return self._push(value, xs, "stack_rows", backward)

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss: Node) -> "OrderedDict[str, np.ndarray]":
        """Fill ``.grad`` on every node reachable from ``loss`` and return
        the parameter gradients keyed by name."""
        if self._backward_done:
            raise StateError("backward already ran on this tape; call reset()")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
        self._backward_done = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        return OrderedDict(
            (name, node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in self.params.items())

    def reset(self) -> None:
        for node in self.nodes:
            node.grad = None
        self._backward_done = False


def bind(tape: Tape, params: "ParameterVector") -> dict[str, Node]:
    """Register every parameter on ``tape``; returns name -> leaf node."""
    return {name: tape.param(name, value) for name, value in params.items()}


class ParameterVector:
    """Ordered collection of named float64 arrays; the flat view is the
    concatenation of each array in row-major order."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] | Mapping = ()):
        if isinstance(items, Mapping):
            items = items.items()
        self._data: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (k, as_float(v)) for k, v in items)

    def __getitem__(self, name):
        return self._data[name]

    def __setitem__(self, name, value):
        self._data[name] = as_float(value)

    def __contains__(self, name):
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def shapes(self) -> list[tuple[str, tuple]]:
        return [(k, v.shape) for k, v in self._data.items()]

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def copy(self) -> "ParameterVector":
        return ParameterVector((k, v.copy()) for k, v in self._data.items())

    def flatten(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def unflatten(self, flat: np.ndarray) -> "ParameterVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"flat vector has shape {flat.shape}, "
                             f"expected ({self.size},)")
        out, pos = [], 0
        for k, v in self._data.items():
            out.append((k, flat[pos:pos + v.size].reshape(v.shape).copy()))
            pos += v.size
        return ParameterVector(out)

    def map(self, fn) -> "ParameterVector":
        return ParameterVector((k, fn(v)) for k, v in self._data.items())

    def combine(self, other, fn) -> "ParameterVector":
        if self.names() != other.names():
            raise ShapeError("parameter sets differ")
        return ParameterVector((k, fn(v, other[k])) for k, v in self._data.items())

    def equals(self, other) -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(v, other[k]) for k, v in self._data.items()))

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k, v in self._data.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def finite_diff_check(loss_fn, params: ParameterVector, h: float = 1e-5,
                      grads: Mapping | None = None, batch: int = 0,
                      names: Iterable[str] | None = None,
                      extended: bool = False) -> float:
    """Largest relative gap between autodiff and central differences,
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.

    ``loss_fn(params, tape)`` must return a scalar loss node. When ``batch``
    is positive the perturbed parameter sets are evaluated ``batch`` at a
    time by handing ``loss_fn`` arrays with a leading batch axis; the loss
    node it returns then has shape ``(B, 1, 1)``.

    ``extended=True`` evaluates the perturbed losses in ``np.longdouble`` so
    the difference quotient is not swamped by float64 round-off
    (about ``eps * loss / h``) on near-zero gradient entries.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if grads is None:
        tape = Tape()
        grads = tape.backward(loss_fn(params, tape))
    dtype = np.longdouble if extended else np.float64
    selected = list(names) if names is not None else params.names()
    offsets, pos = {}, 0
    for k, v in params.items():
        offsets[k] = (pos, pos + v.size)
        pos += v.size
    idx = np.concatenate([np.arange(*offsets[k]) for k in selected]) \
        if selected else np.zeros(0, dtype=int)
    flat = params.flatten().astype(dtype)
    g_fd = np.empty(idx.size)
    if batch > 0:
        for lo in range(0, idx.size, batch):
            chunk = idx[lo:lo + batch]
            g_fd[lo:lo + chunk.size] = _fd_batched(loss_fn, params, flat, chunk, h)
    else:
        for j, i in enumerate(idx):
            vals = []
            for sign in (1.0, -1.0):
                f = flat.copy()
                f[i] += sign * h
                vals.append(loss_fn(_unflatten_like(params, f), Tape()).value.ravel()[0])
            g_fd[j] = float((vals[0] - vals[1]) / (2 * h))
    g_ad = np.concatenate([np.asarray(grads[k], dtype=np.float64).ravel()
                           for k in selected]) if selected else np.zeros(0)
    if g_ad.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def _unflatten_like(params: ParameterVector, flat: np.ndarray) -> ParameterVector:
    """Split ``flat`` (shape ``(..., P)``) into arrays shaped like ``params``;
    leading axes become batch axes."""
    lead = flat.shape[:-1]
    out, pos = [], 0
    for k, v in params.items():
        out.append((k, flat[..., pos:pos + v.size].reshape(lead + v.shape)))
        pos += v.size
    return ParameterVector(out)


def _fd_batched(loss_fn, params, flat, idx, h):
    # only parameters touched by this chunk carry the batch axis
    b = len(idx)
    items, pos = [], 0
    for k, v in params.items():
        lo, hi = pos, pos + v.size
        pos = hi
        base = flat[lo:hi].reshape(v.shape)
        hit = (idx >= lo) & (idx < hi)
        if not hit.any():
            items.append((k, base))
            continue
        stacked = np.broadcast_to(base, (2 * b,) + v.shape).copy()
        view = stacked.reshape(2 * b, -1)
        rows = np.nonzero(hit)[0]
        view[rows, idx[hit] - lo] += h
        view[b + rows, idx[hit] - lo] -= h
        items.append((k, stacked))
    out = loss_fn(ParameterVector(items), Tape()).value.reshape(2 * b)
    return ((out[:b] - out[b:]) / (2 * h)).astype(np.float64)

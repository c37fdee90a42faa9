"""Minimal N-D tensor with a dynamic reverse-mode tape.

Arrays are plain numpy buffers. Every primitive records a node holding its
parents and a vector-Jacobian closure; ``backward`` walks the nodes reachable
from a scalar loss in reverse execution order.
"""

from __future__ import annotations

import itertools
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SEQ = itertools.count()
_state = threading.local()

# small contractions are accumulated in a fixed k-loop; larger ones go to BLAS,
# which is also deterministic for a given shape on a given machine
_ORDERED_K = 16
_ORDERED_OUT = 1 << 14


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def make_rng(seed: int, name: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator keyed by an integer seed and a stream name."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class Node:
    __slots__ = ("seq", "parents", "vjp", "consumed")

    def __init__(self, parents, vjp):
        self.seq = next(_SEQ)
        self.parents = parents
        self.vjp = vjp
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.name = name

    # -- properties -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def make_result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``vjp(g)`` returns one gradient (or ``None``) per parent, in order.
    Nothing is recorded when no parent requires grad or recording is off.
    """
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(tuple(parents), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible")
        out.append(max(x, y) if min(x, y) != 0 else 0)
    return tuple(reversed(out))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make_result(ad ** exponent, (a,),
                       lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return make_result(out, (a,), vjp)


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``b`` is required for binary kinds."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "abs": absolute,
             "sigmoid": sigmoid, "gelu": gelu}
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    broadcast_shape(a.shape, shape)
    old = a.shape
    return make_result(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,),
                       lambda g: (_unbroadcast(g, old),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(a.data[index]), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"cannot split axis of size {n} into {sections} parts")
    step = n // sections
    axis = axis % a.ndim
    out = []
    for i in range(sections):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(idx)))
    return out


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if mode == "circular":
        return idx % n
    if mode == "reflect":
        if n == 1:
            return np.zeros_like(idx)
        period = 2 * (n - 1)
        idx = np.abs(idx) % period
        return np.where(idx >= n, period - idx, idx)
    raise ValueError(f"unknown padding mode {mode!r}")


def pad(a: Tensor, widths: Sequence[tuple[int, int]], mode: str = "zeros") -> Tensor:
    """Pad every axis by ``widths[i] = (before, after)``; modes zeros|reflect|circular."""
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"padding spec for {len(widths)} axes, tensor has shape {a.shape}")
    if mode == "zeros":
        inner = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
        return make_result(np.pad(a.data, widths), (a,), lambda g: (g[inner],))
    maps = [_pad_index(n, b, e, mode) if (b or e) else None
            for n, (b, e) in zip(a.shape, widths)]
    out = a.data
    for ax, m in enumerate(maps):
        if m is not None:
            out = np.take(out, m, axis=ax)
    shape = a.shape

    def vjp(g):
        for ax in reversed(range(len(shape))):
            m = maps[ax]
            if m is None:
                continue
            moved = np.moveaxis(g, ax, 0)
            acc = np.zeros((shape[ax],) + moved.shape[1:], dtype=g.dtype)
            np.add.at(acc, m, moved)
            g = np.moveaxis(acc, 0, ax)
        return (g,)

    return make_result(np.ascontiguousarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# contraction and normalisation
# ---------------------------------------------------------------------------

def _contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = a.shape[-1]
    n_out = a.size // k * b.shape[-1]
    if k > _ORDERED_K or n_out > _ORDERED_OUT:
        return np.matmul(a, b)
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for i in range(1, k):
        out = out + a[..., :, i:i + 1] * b[..., i:i + 1, :]
    return out


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(_contract(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(_contract(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(_contract(ad, bd), (a, b), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    peak = x.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(peak)):
        raise ValueError("softmax over a slice that is entirely -inf")
    e = np.exp(x - peak)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), vjp)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    w, b = weight.data, bias.data
    n = xd.shape[-1]

    def vjp(g):
        gw = _unbroadcast(g * xhat, w.shape) if weight.requires_grad else None
        gb = _unbroadcast(g, b.shape) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gw, gb

    return make_result(xhat * w + b, (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class Graph:
    """Nodes reachable from a root, in execution (creation) order."""

    def __init__(self, root: Tensor):
        if root.node is None:
            raise GraphError("tensor is not on a gradient tape (detached or no input requires grad)")
        seen: set[int] = set()
        nodes: list[tuple[Node, Tensor]] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node is None or id(t.node) in seen:
                continue
            seen.add(id(t.node))
            nodes.append((t.node, t))
            stack.extend(t.node.parents)
        nodes.sort(key=lambda pair: pair[0].seq)
        self.entries = nodes

    @property
    def nodes(self) -> list[Node]:
        return [n for n, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires-grad leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph(loss)
    if any(node.consumed for node in graph.nodes):
        raise GraphError("graph already consumed by a previous backward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in reversed(graph.entries):
        g = grads.pop(id(out), None)
        node.consumed = True
        vjp, node.vjp = node.vjp, None
        if g is None:
            continue
        parent_grads = vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``f`` is re-evaluated from scratch for every perturbation, so it must read
    the current contents of ``x``. With ``max_coords`` a seeded subset of
    coordinates is probed per tensor.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("finite_diff_check needs float64 tensors")
        t.requires_grad = True
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]
    rng = make_rng(seed, "finite_diff_check")
    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * eps)
                err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    for t in xs:
        t.grad = None
    return worst

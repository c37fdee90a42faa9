"""Parameter containers and the small set of layers the network is built from.

All feature maps are channel-last: ``[N, H, W, C]``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numba
import numpy as np

from . import tensor as T
from .tensor import Tensor


# -- initialisers: (rng, shape) -> ndarray ----------------------------------

def trunc_normal(std: float = 0.02) -> Callable:
    def init(rng, shape):
        x = rng.standard_normal(shape)
        while True:
            bad = np.abs(x) > 2.0
            if not bad.any():
                return x * std
            x[bad] = rng.standard_normal(int(bad.sum()))
    return init


def fan_in_uniform(fan_in: int) -> Callable:
    bound = 1.0 / math.sqrt(fan_in)
    return lambda rng, shape: rng.uniform(-bound, bound, size=shape)


def constant(value: float) -> Callable:
    return lambda rng, shape: np.full(shape, value)


zeros = constant(0.0)
ones = constant(1.0)


class Parameter(Tensor):
    __slots__ = ("init",)

    def __init__(self, shape, init: Callable = zeros):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init


class Module:
    """Registers Parameters, buffers and submodules by attribute name, in order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        owner = self
        *path, leaf = dotted.split(".")
        for part in path:
            owner = owner._children[part]
        if leaf not in owner._buffers:
            raise KeyError(dotted)
        object.__setattr__(owner, leaf, value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def initialize(self, seed: int) -> "Module":
        """Draw every parameter from its own stream keyed by (seed, full name)."""
        for name, p in self.named_parameters():
            p.data = np.ascontiguousarray(p.init(T.make_rng(seed, name), p.shape), dtype=p.dtype)
            p.grad = None
        return self

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in m._buffers:
                object.__setattr__(m, name, getattr(m, name).astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# -- functional helpers -------------------------------------------------------

@numba.njit(cache=True)
def _dw_forward(xp, kern, out):
    n_, h_, w_, c_ = out.shape
    nb, k = kern.shape[0], kern.shape[1]
    for n in range(n_):
        b = n if nb > 1 else 0
        for i in range(h_):
            for j in range(w_):
                for p in range(k):
                    for q in range(k):
                        for c in range(c_):
                            out[n, i, j, c] += xp[n, i + p, j + q, c] * kern[b, p, q, c]


@numba.njit(cache=True)
def _dw_grad_input(g, kern, gx):
    n_, h_, w_, c_ = g.shape
    nb, k = kern.shape[0], kern.shape[1]
    for n in range(n_):
        b = n if nb > 1 else 0
        for i in range(h_):
            for j in range(w_):
                for p in range(k):
                    for q in range(k):
                        for c in range(c_):
                            gx[n, i + p, j + q, c] += g[n, i, j, c] * kern[b, p, q, c]


@numba.njit(cache=True)
def _dw_grad_kernel(g, xp, gk):
    n_, h_, w_, c_ = g.shape
    k = gk.shape[1]
    for n in range(n_):
        for p in range(k):
            for q in range(k):
                for i in range(h_):
                    for j in range(w_):
                        for c in range(c_):
                            gk[n, p, q, c] += g[n, i, j, c] * xp[n, i + p, j + q, c]


def depthwise_conv(x: Tensor, kernel: Tensor, padding: str = "zeros") -> Tensor:
    """Per-channel k x k correlation of ``x[N,H,W,C]`` with ``kernel[B,k,k,C]``.

    ``B`` is 1 (shared kernel) or N (one kernel per image). Output keeps the
    spatial size; borders follow ``padding`` (zeros|reflect|circular).
    """
    nb, k, k2, c = kernel.shape
    if k != k2 or k % 2 == 0:
        raise T.ShapeError(f"kernel must be square with odd size, got {kernel.shape}")
    if x.shape[-1] != c:
        raise T.ShapeError(f"kernel channels {c} do not match input {x.shape}")
    if nb not in (1, x.shape[0]):
        raise T.ShapeError(f"kernel batch {nb} does not match input {x.shape}")
    r = k // 2
    xp = T.pad(x, [(0, 0), (r, r), (r, r), (0, 0)], padding)
    dtype = np.result_type(xp.dtype, kernel.dtype)
    xd = xp.data.astype(dtype, copy=False)
    kd = kernel.data.astype(dtype, copy=False)
    out = np.zeros(x.shape, dtype=dtype)
    _dw_forward(xd, kd, out)

    def vjp(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        gx = gk = None
        if xp.requires_grad:
            gx = np.zeros_like(xd)
            _dw_grad_input(g, kd, gx)
        if kernel.requires_grad:
            gk = np.zeros((g.shape[0], k, k, c), dtype=dtype)
            _dw_grad_kernel(g, xd, gk)
            if nb == 1:
                gk = gk.sum(axis=0, keepdims=True)
        return gx, gk

    return T.make_result(out, (xp, kernel), vjp)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "zeros") -> Tensor:
    """Dense k x k convolution; ``weight`` is ``[k, k, Cin, Cout]``."""
    k = weight.shape[0]
    n, h, w, cin = x.shape
    if weight.shape[2] != cin:
        raise T.ShapeError(f"conv weight {weight.shape} does not match input {x.shape}")
    r = k // 2
    xp = T.pad(x, [(0, 0), (r, r), (r, r), (0, 0)], padding)
    cols = T.concat([xp[:, p:p + h, q:q + w, :] for p in range(k) for q in range(k)], axis=-1)
    out = T.matmul(cols.reshape(n * h * w, k * k * cin), weight.reshape(k * k * cin, weight.shape[3]))
    if bias is not None:
        out = out + bias
    return out.reshape(n, h, w, weight.shape[3])


def pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution over the last axis; ``weight`` is ``[Cin, Cout]``."""
    lead = x.shape[:-1]
    out = T.matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, weight.shape[1])


# -- layers -------------------------------------------------------------------

class Conv1x1(Module):
    def __init__(self, cin: int, cout: int, bias: bool = False, init: Callable | None = None):
        super().__init__()
        self.weight = Parameter((cin, cout), init or trunc_normal(0.02))
        self.bias = Parameter((cout,), zeros) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return pointwise(x, self.weight, self.bias)


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, bias: bool = False,
                 padding: str = "zeros", init: Callable | None = None):
        super().__init__()
        self.padding = padding
        self.weight = Parameter((k, k, cin, cout), init or fan_in_uniform(k * k * cin))
        self.bias = Parameter((cout,), zeros) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.padding)


class DepthwiseConv(Module):
    def __init__(self, channels: int, k: int = 3, padding: str = "zeros", bias: bool = False):
        super().__init__()
        self.padding = padding
        self.weight = Parameter((1, k, k, channels), fan_in_uniform(k * k))
        self.bias = Parameter((channels,), zeros) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = depthwise_conv(x, self.weight, self.padding)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = Parameter((channels,), ones)
        self.bias = Parameter((channels,), zeros)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class BatchNorm(Module):
    """Normalises ``[N, C]`` over the batch axis; running stats for eval."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter((channels,), ones)
        self.bias = Parameter((channels,), zeros)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            n = x.shape[0]
            mu = T.mean(x, axis=0, keepdims=True)
            xc = x - mu
            var = T.mean(xc * xc, axis=0, keepdims=True)
            unbiased = var.data[0] * (n / (n - 1)) if n > 1 else var.data[0]
            m = self.momentum
            object.__setattr__(self, "running_mean", (1 - m) * self.running_mean + m * mu.data[0])
            object.__setattr__(self, "running_var", (1 - m) * self.running_var + m * unbiased)
            xhat = xc / T.sqrt(var + self.eps)
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xhat * self.weight + self.bias

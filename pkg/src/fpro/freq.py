"""Frequency machinery: learned low-pass banks, grouped dynamic convolution,
packed real FFTs, pixel (un)shuffle and bilinear resampling.

Spectra are stored as real tensors ``[..., H, W//2+1, 2C]``: all real parts
first, then all imaginary parts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# packed real FFT
# ---------------------------------------------------------------------------

def rfft2(x: Tensor) -> Tensor:
    """Real 2-D FFT over the two axes preceding the channel axis."""
    h, w, c = x.shape[-3:]
    spec = np.fft.rfft2(x.data, axes=(-3, -2))
    out = np.concatenate([spec.real, spec.imag], axis=-1).astype(x.dtype, copy=False)
    wf = w // 2 + 1

    def vjp(g):
        full = np.zeros(g.shape[:-3] + (h, w, c), dtype=np.complex128)
        full[..., :wf, :] = g[..., :c] + 1j * g[..., c:]
        return ((np.fft.ifft2(full, axes=(-3, -2)).real * (h * w)).astype(g.dtype, copy=False),)

    return T.make_result(out, (x,), vjp)


def _hermitian_weights(w: int) -> np.ndarray:
    wf = w // 2 + 1
    cv = np.full(wf, 2.0)
    cv[0] = 1.0
    if w % 2 == 0:
        cv[-1] = 1.0
    return cv


def irfft2(spec: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`rfft2` for a spatial size ``h x w``."""
    sh, wf, c2 = spec.shape[-3:]
    if sh != h or wf != w // 2 + 1 or c2 % 2:
        raise ShapeError(f"spectrum {spec.shape} does not match spatial size {h}x{w}")
    c = c2 // 2
    z = spec.data[..., :c] + 1j * spec.data[..., c:]
    out = np.fft.irfft2(z, s=(h, w), axes=(-3, -2)).astype(spec.dtype, copy=False)
    cv = (_hermitian_weights(w) / (h * w))[:, None]

    def vjp(g):
        r = np.fft.rfft2(g, axes=(-3, -2))
        return (np.concatenate([r.real * cv, r.imag * cv], axis=-1).astype(g.dtype, copy=False),)

    return T.make_result(out, (spec,), vjp)


def complex_mul(a: Tensor, b) -> Tensor:
    """Elementwise complex product of two packed spectra."""
    c = a.shape[-1] // 2
    ar, ai = a[..., :c], a[..., c:]
    b = T.as_tensor(b, a.dtype)
    br, bi = b[..., :c], b[..., c:]
    return T.concat([ar * br - ai * bi, ar * bi + ai * br], axis=-1)


# ---------------------------------------------------------------------------
# rearrangement and resampling
# ---------------------------------------------------------------------------

def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """``[N,H,W,C] -> [N,H/r,W/r,C*r*r]``; output channel ``c*r*r + i*r + j``."""
    n, h, w, c = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial size {h}x{w} not divisible by {r}")
    y = x.reshape(n, h // r, r, w // r, r, c).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(n, h // r, w // r, c * r * r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    n, h, w, cr = x.shape
    if cr % (r * r):
        raise ShapeError(f"channel count {cr} not divisible by {r * r}")
    c = cr // (r * r)
    y = x.reshape(n, h, w, c, r, r).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(n, h * r, w * r, c)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``d`` holds the interpolation weights of output sample ``d`` (half-pixel centres)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _mix_axis(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    m = m.astype(x.dtype)
    out = np.moveaxis(np.tensordot(m, np.moveaxis(x.data, axis, 0), axes=(1, 0)), 0, axis)

    def vjp(g):
        back = np.tensordot(m.T, np.moveaxis(g, axis, 0), axes=(1, 0))
        return (np.ascontiguousarray(np.moveaxis(back, 0, axis)),)

    return T.make_result(np.ascontiguousarray(out), (x,), vjp)


def resize_bilinear(x: Tensor, h: int, w: int) -> Tensor:
    """Separable bilinear resize of ``[..., H, W, C]``; the same tensor is returned when sizes agree."""
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    hin, win = x.shape[-3], x.shape[-2]
    if hin != h:
        x = _mix_axis(x, bilinear_matrix(hin, h), x.ndim - 3)
    if win != w:
        x = _mix_axis(x, bilinear_matrix(win, w), x.ndim - 2)
    return x


# ---------------------------------------------------------------------------
# gated dynamic decoupler
# ---------------------------------------------------------------------------

@dataclass
class FilterBank:
    low: Tensor   # [N, g, k, k]
    high: Tensor  # [N, g, k, k]

    @property
    def groups(self) -> int:
        return self.low.shape[1]

    @property
    def k(self) -> int:
        return self.low.shape[-1]


@dataclass
class FrequencyPair:
    lo: Tensor
    hi: Tensor


def identity_kernel(k: int) -> np.ndarray:
    d = np.zeros((k, k))
    d[k // 2, k // 2] = 1.0
    return d


def complement(low: Tensor) -> Tensor:
    """High-pass bank: identity kernel minus each low-pass kernel."""
    return T.sub(identity_kernel(low.shape[-1]).astype(low.dtype), low)


class GatedDynamicDecoupler(nn.Module):
    """Predicts one low-pass bank per image and splits features into two bands.

    pooled -> 1x1 conv -> gated by sigmoid(1x1 conv) -> BatchNorm -> softmax over k*k.
    """

    def __init__(self, channels: int, groups: int = 8, k: int = 3, padding: str = "reflect"):
        super().__init__()
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.groups, self.k, self.padding = groups, k, padding
        gk = groups * k * k
        self.filter_conv = nn.Conv1x1(channels, gk, init=nn.trunc_normal(1.0 / np.sqrt(channels)))
        self.gate_conv = nn.Conv1x1(gk, gk, init=nn.trunc_normal(1.0 / np.sqrt(gk)))
        self.bn = nn.BatchNorm(gk)

    def predict_lowpass(self, f_s: Tensor) -> FilterBank:
        n, _, _, c = f_s.shape
        if c % self.groups:
            raise ShapeError(f"channels {c} not divisible by groups {self.groups}")
        pooled = T.mean(f_s, axis=(1, 2))
        squeezed = self.filter_conv(pooled)
        gated = squeezed * T.sigmoid(self.gate_conv(squeezed))
        logits = self.bn(gated).reshape(n, self.groups, self.k * self.k)
        low = T.softmax(logits, axis=-1).reshape(n, self.groups, self.k, self.k)
        return FilterBank(low, complement(low))

    def forward(self, f_s: Tensor) -> FrequencyPair:
        bank = self.predict_lowpass(f_s)
        return FrequencyPair(grouped_dynamic_conv(f_s, bank.low, self.padding),
                             grouped_dynamic_conv(f_s, bank.high, self.padding))


def _set_mode(module: nn.Module, mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")


def predict_lowpass(params: GatedDynamicDecoupler, f_s: Tensor, mode: str = "eval") -> FilterBank:
    _set_mode(params, mode)
    return params.predict_lowpass(f_s)


def grouped_dynamic_conv(x: Tensor, bank, padding: str = "reflect") -> Tensor:
    """Convolve channel group ``i`` of ``x[N,H,W,C]`` with kernel ``bank[:, i]``.

    ``bank`` is a FilterBank (its low kernels are used) or a ``[N|1, g, k, k]`` tensor.
    """
    kernels = bank.low if isinstance(bank, FilterBank) else bank
    nb, g, k, k2 = kernels.shape
    c = x.shape[-1]
    if k % 2 == 0 or k != k2:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if c % g:
        raise ShapeError(f"channels {c} not divisible by {g} groups")
    per = c // g
    per_channel = kernels.transpose(0, 2, 3, 1).reshape(nb, k, k, g, 1)
    per_channel = T.broadcast_to(per_channel, (nb, k, k, g, per)).reshape(nb, k, k, c)
    return nn.depthwise_conv(x, per_channel, padding)


def gdd_decompose(params: GatedDynamicDecoupler, f_s: Tensor, mode: str = "eval") -> FrequencyPair:
    _set_mode(params, mode)
    return params(f_s)

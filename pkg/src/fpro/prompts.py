"""Dual prompt block: a high-frequency modulator (spatial gate, spatial prompt,
windowed cross-attention) and a low-frequency modulator (spectral gate,
Fourier prompt, pooled cross-attention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .freq import FrequencyPair, complex_mul, irfft2, resize_bilinear, rfft2
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    window: int = 8

    def head_dim(self, channels: int) -> int:
        if channels % self.heads:
            raise ShapeError(f"{channels} channels not divisible by {self.heads} heads")
        return channels // self.heads


# ---------------------------------------------------------------------------
# high-frequency path
# ---------------------------------------------------------------------------

def hpm_gate(x: Tensor, gate_weights: Tensor) -> Tensor:
    """``x * GELU(depthwise3x3(x))`` with reflect borders; ``gate_weights`` is ``[1,3,3,C]``."""
    return x * T.gelu(nn.depthwise_conv(x, gate_weights, "reflect"))


def hpm_inject(gated: Tensor, p_hi: Tensor) -> Tensor:
    """Multiply by the spatial prompt, resampled to the feature size if needed."""
    h, w = gated.shape[-3], gated.shape[-2]
    return gated * resize_bilinear(p_hi, h, w)


def window_partition(x: Tensor, m: int) -> Tensor:
    """``[N,H,W,C] -> [N*nH*nW, m*m, C]`` with windows in row-major order."""
    n, h, w, c = x.shape
    y = x.reshape(n, h // m, m, w // m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n * (h // m) * (w // m), m * m, c)


def window_merge(win: Tensor, m: int, n: int, h: int, w: int) -> Tensor:
    c = win.shape[-1]
    y = win.reshape(n, h // m, w // m, m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, h, w, c)


def _pad_to_multiple(x: Tensor, m: int) -> Tensor:
    h, w = x.shape[1], x.shape[2]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x
    return T.pad(x, [(0, 0), (0, ph), (0, pw), (0, 0)], "reflect")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return x.reshape(b, t, heads, c // heads).transpose(0, 2, 1, 3)


class WindowCrossAttention(nn.Module):
    """Queries from decoder features, keys/values from the prompt, inside M x M windows."""

    def __init__(self, dim: int, prompt_dim: int, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        cfg.head_dim(dim)
        self.q = nn.Conv1x1(dim, dim, bias=True)
        self.k = nn.Conv1x1(prompt_dim, dim, bias=True)
        self.v = nn.Conv1x1(prompt_dim, dim, bias=True)
        self.proj = nn.Conv1x1(dim, dim, bias=True)

    def attention_map(self, f_l: Tensor, prompt: Tensor) -> tuple[Tensor, Tensor]:
        """``A[windows, heads, M*M, M*M]`` (softmax over keys) and ``V[windows, heads, M*M, d]``."""
        h, w, c = f_l.shape[1:]
        if prompt.shape[1:3] != (h, w):
            raise ShapeError(f"prompt {prompt.shape} and features {f_l.shape} differ spatially")
        m, heads = self.cfg.window, self.cfg.heads
        d = self.cfg.head_dim(c)
        fq, fp = _pad_to_multiple(f_l, m), _pad_to_multiple(prompt, m)
        q = _split_heads(self.q(window_partition(fq, m)), heads)
        k = _split_heads(self.k(window_partition(fp, m)), heads)
        v = _split_heads(self.v(window_partition(fp, m)), heads)
        attn = T.softmax(T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)), axis=-1)
        return attn, v

    def attend(self, f_l: Tensor, prompt: Tensor) -> Tensor:
        """Windowed attention before the output projection."""
        n, h, w, c = f_l.shape
        m = self.cfg.window
        hp, wp = h + (-h) % m, w + (-w) % m
        attn, v = self.attention_map(f_l, prompt)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(-1, m * m, c)
        out = window_merge(out, m, n, hp, wp)
        if (hp, wp) != (h, w):
            out = out[:, :h, :w, :]
        return out

    def forward(self, f_l: Tensor, prompt: Tensor) -> Tensor:
        return self.proj(self.attend(f_l, prompt))


def window_cross_attention(f_l: Tensor, prompt: Tensor, cfg: AttentionConfig,
                           proj_weights: WindowCrossAttention) -> Tensor:
    if proj_weights.cfg != cfg:
        raise ValueError("attention config does not match projection weights")
    return proj_weights(f_l, prompt)


class HighFrequencyPromptModulator(nn.Module):
    def __init__(self, dim: int, prompt_dim: int, native: tuple[int, int], cfg: AttentionConfig):
        super().__init__()
        self.native = tuple(native)
        self.gate = nn.Parameter((1, 3, 3, prompt_dim), nn.fan_in_uniform(9))
        self.p_hi = nn.Parameter(self.native + (prompt_dim,), _spatial_prompt_init)
        self.enhance = nn.DepthwiseConv(prompt_dim, 3)
        self.attn = WindowCrossAttention(dim, prompt_dim, cfg)

    def prompt(self, f_hi: Tensor, h: int, w: int) -> Tensor:
        """Prompt feature at ``h x w`` before the high-pass depthwise conv."""
        return hpm_inject(hpm_gate(resize_bilinear(f_hi, h, w), self.gate), self.p_hi)

    def forward(self, f_l: Tensor, f_hi: Tensor) -> Tensor:
        h, w = f_l.shape[1], f_l.shape[2]
        return self.attn(f_l, self.enhance(self.prompt(f_hi, h, w)))


# ---------------------------------------------------------------------------
# low-frequency path
# ---------------------------------------------------------------------------

class SpectralGate(nn.Module):
    """1x1 conv with bias over the packed ``2C`` spectral channels."""

    def __init__(self, prompt_dim: int):
        super().__init__()
        self.conv = nn.Conv1x1(2 * prompt_dim, 2 * prompt_dim, bias=True)

    def forward(self, spec: Tensor) -> Tensor:
        return T.gelu(self.conv(spec))


def lpm_spectral_gate(x: Tensor, gate_weights) -> Tensor:
    """``rfft2(x) * GELU(conv1x1(rfft2(x)))`` with the product taken as complex."""
    spec = rfft2(x)
    return complex_mul(spec, gate_weights(spec))


def resize_spectral_prompt(p_lo: Tensor, h: int, w: int) -> Tensor:
    return resize_bilinear(p_lo, h, w // 2 + 1)


def lpm_inject(spec_gated: Tensor, p_lo: Tensor, w: int | None = None) -> Tensor:
    """Complex product with the spectral prompt, then back to the spatial domain.

    The spatial width is ambiguous from a half spectrum; pass ``w`` for odd widths.
    """
    h, wf = spec_gated.shape[-3], spec_gated.shape[-2]
    if w is None:
        w = 2 * (wf - 1)
    prompt = resize_spectral_prompt(p_lo, h, w)
    if prompt.shape[-3:] != spec_gated.shape[-3:]:
        raise ShapeError(f"spectral prompt {prompt.shape} does not match {spec_gated.shape}")
    return irfft2(complex_mul(spec_gated, prompt), h, w)


class PooledCrossAttention(nn.Module):
    """Per-pixel queries against one pooled prompt token; softmax over space."""

    def __init__(self, dim: int, prompt_dim: int, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.head_dim(prompt_dim)
        self.q = nn.Conv1x1(dim, prompt_dim, bias=True)
        self.k = nn.Conv1x1(prompt_dim, prompt_dim, bias=True)
        self.v = nn.Conv1x1(prompt_dim, prompt_dim, bias=True)
        self.alpha = nn.Parameter((cfg.heads,), nn.constant(math.sqrt(d)))
        self.proj = nn.Conv1x1(prompt_dim, prompt_dim, bias=True)

    def attention_map(self, f_l: Tensor, prompt: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``A[N, H*W, heads]`` and ``V[N, heads, d]``."""
        n, h, w, _ = f_l.shape
        heads = self.cfg.heads
        cp = prompt.shape[-1]
        d = cp // heads
        pooled = T.mean(prompt, axis=(1, 2))
        k = self.k(pooled).reshape(n, 1, heads, d)
        v = self.v(pooled).reshape(n, heads, d)
        q = self.q(f_l).reshape(n, h * w, heads, d)
        logits = T.sum_(q * k, axis=-1) / self.alpha
        return T.softmax(logits, axis=1), v

    def forward(self, f_l: Tensor, prompt: Tensor) -> Tensor:
        n, h, w, _ = f_l.shape
        attn, v = self.attention_map(f_l, prompt)
        out = attn.reshape(n, h * w, self.cfg.heads, 1) * v.reshape(n, 1, self.cfg.heads, -1)
        return self.proj(out.reshape(n, h, w, prompt.shape[-1]))


def pooled_cross_attention(f_l: Tensor, prompt: Tensor, cfg: AttentionConfig,
                           proj_weights: PooledCrossAttention) -> Tensor:
    if proj_weights.cfg != cfg:
        raise ValueError("attention config does not match projection weights")
    return proj_weights(f_l, prompt)


class LowFrequencyPromptModulator(nn.Module):
    def __init__(self, dim: int, prompt_dim: int, native: tuple[int, int], cfg: AttentionConfig):
        super().__init__()
        self.native = tuple(native)
        self.gate = SpectralGate(prompt_dim)
        self.p_lo = nn.Parameter((native[0], native[1] // 2 + 1, 2 * prompt_dim), _spectral_prompt_init)
        self.attn = PooledCrossAttention(dim, prompt_dim, cfg)

    def prompt(self, f_lo: Tensor, h: int, w: int) -> Tensor:
        x = resize_bilinear(f_lo, h, w)
        return lpm_inject(lpm_spectral_gate(x, self.gate), self.p_lo, w)

    def forward(self, f_l: Tensor, f_lo: Tensor) -> Tensor:
        h, w = f_l.shape[1], f_l.shape[2]
        return self.attn(f_l, self.prompt(f_lo, h, w))


def _spatial_prompt_init(rng, shape):
    return 1.0 + 0.02 * rng.standard_normal(shape)


def _spectral_prompt_init(rng, shape):
    c = shape[-1] // 2
    base = np.concatenate([np.ones(shape[:-1] + (c,)), np.zeros(shape[:-1] + (c,))], axis=-1)
    return base + 0.02 * rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# block
# ---------------------------------------------------------------------------

class DualPromptBlock(nn.Module):
    def __init__(self, dim: int, prompt_dim: int, native: tuple[int, int], cfg: AttentionConfig,
                 use_hpm: bool = True, use_lpm: bool = True):
        super().__init__()
        self.use_hpm, self.use_lpm = use_hpm, use_lpm
        self.hpm = HighFrequencyPromptModulator(dim, prompt_dim, native, cfg) if use_hpm else None
        self.lpm = LowFrequencyPromptModulator(dim, prompt_dim, native, cfg) if use_lpm else None

    @property
    def out_channels(self) -> int:
        c = 0
        if self.hpm is not None:
            c += self.hpm.attn.proj.weight.shape[1]
        if self.lpm is not None:
            c += self.lpm.attn.proj.weight.shape[1]
        return c

    def forward(self, f_l: Tensor, pair: FrequencyPair) -> tuple[Tensor | None, Tensor | None]:
        hi = self.hpm(f_l, pair.hi) if self.hpm is not None else None
        lo = self.lpm(f_l, pair.lo) if self.lpm is not None else None
        return hi, lo


def dpb_forward(f_l: Tensor, pair: FrequencyPair, params: DualPromptBlock):
    """Modulated ``(hi, lo)`` prompts at the resolution of ``f_l``; disabled paths give ``None``."""
    return params(f_l, pair)


# ---------------------------------------------------------------------------
# spectral / spatial equivalence check
# ---------------------------------------------------------------------------

def circular_depthwise_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct circular convolution of ``x[..., H, W, C]`` with a full-size kernel ``[..., H, W, C]``."""
    h, w = x.shape[-3], x.shape[-2]
    out = np.zeros(np.broadcast_shapes(x.shape, kernel.shape))
    for a in range(h):
        for b in range(w):
            out += np.roll(x, (a, b), axis=(-3, -2)) * kernel[..., a:a + 1, b:b + 1, :]
    return out


def lpm_equivalence_oracle(f_lo: Tensor, gate_weights, p_lo: Tensor) -> float:
    """Max relative gap between the spectral route and a spatial circular convolution.

    The spatial kernel is ``irfft2(GELU(conv1x1(rfft2(f_lo))) * p_lo)``, i.e. the
    gated prompt seen as one dynamic depthwise kernel as large as the input.
    """
    h, w = f_lo.shape[-3], f_lo.shape[-2]
    with T.no_grad():
        spectral = lpm_inject(lpm_spectral_gate(f_lo, gate_weights), p_lo, w).data
        prompt = resize_spectral_prompt(p_lo, h, w)
        kernel = irfft2(complex_mul(gate_weights(rfft2(f_lo)), prompt), h, w).data
    spatial = circular_depthwise_conv(f_lo.data, kernel)
    scale = max(np.abs(spatial).max(), np.finfo(float).tiny)
    return float(np.abs(spectral - spatial).max() / scale)

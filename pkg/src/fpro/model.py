"""The restoration network: FFN-only encoder, FFN+channel-attention decoder,
skip fusion, prompt-branch fusion and a residual output."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import nn
from . import tensor as T
from .freq import FrequencyPair, GatedDynamicDecoupler, pixel_shuffle, pixel_unshuffle
from .prompts import AttentionConfig, DualPromptBlock
from .tensor import ShapeError, Tensor


class ImageTooSmall(ValueError):
    pass


@dataclass
class ModelConfig:
    levels: int = 3
    blocks: tuple = (2, 3, 6)
    channels: int = 48
    heads: tuple = (2, 4, 8)
    ffn_expansion: float = 3.0
    window: int = 8
    groups: int = 8
    kernel: int = 3
    use_hpm: bool = True
    use_lpm: bool = True
    single_gdd: bool = True
    patch: int = 384

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.heads = tuple(int(h) for h in self.heads)
        self.validate()

    def validate(self) -> None:
        if not (len(self.blocks) == len(self.heads) == self.levels):
            raise ValueError(f"blocks {self.blocks} and heads {self.heads} must both have {self.levels} entries")
        for lvl, h in enumerate(self.heads):
            width = self.width(lvl)
            if self.channels % h or width % h:
                raise ValueError(f"channels {self.channels} (level width {width}) not divisible by {h} heads")
        if self.channels % self.groups:
            raise ValueError(f"channels {self.channels} not divisible by {self.groups} groups")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.patch % (2 ** (self.levels - 1)):
            raise ValueError(f"patch {self.patch} not divisible by {2 ** (self.levels - 1)}")

    def width(self, level: int) -> int:
        return self.channels * 2 ** level

    @property
    def scale(self) -> int:
        return 2 ** (self.levels - 1)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        base = dict(channels=8, blocks=(1, 1, 1), heads=(1, 2, 2), patch=64)
        base.update(overrides)
        return cls(**base)

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kinds = {f.name: f.default for f in fields(cls)}
        kw = {}
        for key, raw in items.items():
            if key not in kinds:
                raise KeyError(key)
            kw[key] = parse_value(kinds[key], raw)
        return cls(**kw)


def parse_value(default, raw: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.strip("[]()").split(",") if x.strip())
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, int):
        return int(raw)
    return raw


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class FeedForward(nn.Module):
    """LayerNorm, 1x1 expand, depthwise 3x3, GELU-gated split, 1x1 project, residual."""

    def __init__(self, dim: int, expansion: float = 3.0):
        super().__init__()
        hidden = int(dim * expansion)
        self.norm = nn.LayerNorm(dim)
        self.project_in = nn.Conv1x1(dim, 2 * hidden)
        self.dwconv = nn.DepthwiseConv(2 * hidden)
        self.project_out = nn.Conv1x1(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        y = self.dwconv(self.project_in(self.norm(x)))
        a, b = T.split(y, 2, axis=-1)
        return x + self.project_out(T.gelu(a) * b)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / T.sqrt(T.sum_(x * x, axis=axis, keepdims=True) + eps)


class ChannelAttention(nn.Module):
    """Transposed attention: a (C/heads x C/heads) map per head over channel descriptors."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"{dim} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Conv1x1(dim, 3 * dim)
        self.qkv_dw = nn.DepthwiseConv(3 * dim)
        self.temperature = nn.Parameter((heads,), nn.ones)
        self.proj = nn.Conv1x1(dim, dim)

    def attention_map(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, h, w, c = x.shape
        d = c // self.heads
        y = self.qkv_dw(self.qkv(self.norm(x)))

        def heads_first(t):
            return t.reshape(n, h * w, self.heads, d).transpose(0, 2, 3, 1)

        q, k, v = (heads_first(t) for t in T.split(y, 3, axis=-1))
        q, k = l2_normalize(q), l2_normalize(k)
        logits = T.matmul(q, k.transpose(0, 1, 3, 2)) * self.temperature.reshape(1, self.heads, 1, 1)
        return T.softmax(logits, axis=-1), v

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        attn, v = self.attention_map(x)
        out = T.matmul(attn, v).transpose(0, 3, 1, 2).reshape(n, h, w, c)
        return x + self.proj(out)


def ffn_forward(x: Tensor, weights: FeedForward) -> Tensor:
    if x.shape[-1] != weights.norm.weight.shape[0]:
        raise ShapeError(f"input channels {x.shape[-1]} do not match FFN width {weights.norm.weight.shape[0]}")
    return weights(x)


def msa_forward(x: Tensor, weights: ChannelAttention, heads: int | None = None) -> Tensor:
    if heads is not None and heads != weights.heads:
        raise ShapeError(f"weights built for {weights.heads} heads, asked for {heads}")
    if x.shape[-1] % weights.heads:
        raise ShapeError(f"{x.shape[-1]} channels not divisible by {weights.heads} heads")
    return weights(x)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, expansion: float):
        super().__init__()
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x):
        return self.ffn(x)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, expansion: float):
        super().__init__()
        self.msa = ChannelAttention(dim, heads)
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x):
        return self.ffn(self.msa(x))


class Downsample(nn.Module):
    """Pixel-unshuffle by 2, then 1x1 projection to twice the width."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Conv1x1(4 * dim, 2 * dim, init=nn.fan_in_uniform(4 * dim))

    def forward(self, x):
        return self.proj(pixel_unshuffle(x, 2))


class Upsample(nn.Module):
    """1x1 projection to twice the width, then pixel-shuffle by 2 (width halves)."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Conv1x1(dim, 2 * dim, init=nn.fan_in_uniform(dim))

    def forward(self, x):
        return pixel_shuffle(self.proj(x), 2)


def _fuse(cin: int, cout: int) -> nn.Conv1x1:
    return nn.Conv1x1(cin, cout, init=nn.fan_in_uniform(cin))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class FPro(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        c = cfg.channels
        self.shallow = nn.Conv(3, c, 3, bias=True, padding="reflect")
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for lvl in range(cfg.levels):
            w = cfg.width(lvl)
            self.encoders.append(nn.ModuleList(EncoderBlock(w, cfg.ffn_expansion)
                                               for _ in range(cfg.blocks[lvl])))
            if lvl < cfg.levels - 1:
                self.downs.append(Downsample(w))

        use_prompts = cfg.use_hpm or cfg.use_lpm
        n_gdd = 0 if not use_prompts else (1 if cfg.single_gdd else cfg.levels)
        self.gdds = nn.ModuleList(GatedDynamicDecoupler(c, cfg.groups, cfg.kernel) for _ in range(n_gdd))

        # decoder modules are indexed by level, 0 = full resolution
        self.decoders = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.skips = nn.ModuleList()
        self.prompts = nn.ModuleList()
        self.fusions = nn.ModuleList()
        for lvl in range(cfg.levels):
            w = cfg.width(lvl)
            self.decoders.append(nn.ModuleList(DecoderBlock(w, cfg.heads[lvl], cfg.ffn_expansion)
                                               for _ in range(cfg.blocks[lvl])))
            if lvl < cfg.levels - 1:
                self.ups.append(Upsample(cfg.width(lvl + 1)))
                self.skips.append(_fuse(2 * w, w))
            if use_prompts:
                native = (cfg.patch // 2 ** lvl,) * 2
                acfg = AttentionConfig(cfg.heads[lvl], cfg.window)
                dpb = DualPromptBlock(w, c, native, acfg, cfg.use_hpm, cfg.use_lpm)
                self.prompts.append(dpb)
                extra = (w if cfg.use_hpm else 0) + (c if cfg.use_lpm else 0)
                self.fusions.append(_fuse(w + extra, w))
        self.output = nn.Conv(c, 3, 3, bias=True, init=nn.zeros)

    # -- helpers -----------------------------------------------------------
    def _pair(self, f_s: Tensor, lvl: int, cache: dict) -> FrequencyPair:
        idx = 0 if self.config.single_gdd else lvl
        if idx not in cache:
            cache[idx] = self.gdds[idx](f_s)
        return cache[idx]

    def _prompt_fuse(self, x: Tensor, f_s: Tensor, lvl: int, cache: dict) -> Tensor:
        if not len(self.prompts):
            return x
        hi, lo = self.prompts[lvl](x, self._pair(f_s, lvl, cache))
        parts = [x] + [p for p in (hi, lo) if p is not None]
        return self.fusions[lvl](T.concat(parts, axis=-1))

    def forward(self, image: Tensor) -> Tensor:
        """Residual estimate ``I + R`` (unclamped) for ``image[N,H,W,3]``."""
        cfg = self.config
        n, h, w, ch = image.shape
        if ch != 3:
            raise ShapeError(f"expected 3 input channels, got {ch}")
        s = cfg.scale
        if h < s or w < s:
            raise ImageTooSmall(f"image {h}x{w} smaller than the minimum {s}x{s}")
        ph, pw = (-h) % s, (-w) % s
        x = image if not (ph or pw) else T.pad(image, [(0, 0), (0, ph), (0, pw), (0, 0)], "reflect")

        f_s = self.shallow(x)
        skips = []
        feat = f_s
        for lvl in range(cfg.levels):
            for blk in self.encoders[lvl]:
                feat = blk(feat)
            if lvl < cfg.levels - 1:
                skips.append(feat)
                feat = self.downs[lvl](feat)

        cache: dict = {}
        for lvl in reversed(range(cfg.levels)):
            if lvl < cfg.levels - 1:
                feat = self.ups[lvl](feat)
                feat = self.skips[lvl](T.concat([feat, skips[lvl]], axis=-1))
            feat = self._prompt_fuse(feat, f_s, lvl, cache)
            for blk in self.decoders[lvl]:
                feat = blk(feat)

        out = x + self.output(feat)
        if ph or pw:
            out = out[:, :h, :w, :]
        return out

    def frequency_pair(self, image: Tensor) -> FrequencyPair:
        """GDD split of the shallow features (first decoupler)."""
        if not len(self.gdds):
            raise ValueError("model has no prompt branch")
        return self.gdds[0](self.shallow(image))


def fpro_forward(model: FPro, image, mode: str = "eval") -> Tensor:
    """Restore ``image`` (``[H,W,3]`` or ``[N,H,W,3]``, values in [0,1]).

    In eval mode the result is clamped to [0,1] and no tape is recorded.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = T.as_tensor(image, model.shallow.weight.dtype)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise ShapeError(f"expected [H,W,3] or [N,H,W,3], got {x.shape}")
    model.train(mode == "train")
    if mode == "eval":
        with T.no_grad():
            out = model(x)
        out = T.Tensor(np.clip(out.data, 0.0, 1.0))
    else:
        out = model(x)
    return out.reshape(*out.shape[1:]) if single else out


def build_model(config: ModelConfig | None = None, seed: int = 0, dtype=np.float64) -> FPro:
    model = FPro(config or ModelConfig()).initialize(seed)
    if dtype != np.float64:
        model.astype(dtype)
    return model


def param_count(config: ModelConfig) -> int:
    return FPro(config).num_parameters()


def param_breakdown(model: FPro) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        counts[top] = counts.get(top, 0) + p.size
    return counts

"""Finite-difference audits of every learned operator, in double precision."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .freq import FrequencyPair, GatedDynamicDecoupler, gdd_decompose, irfft2, rfft2
from .model import ChannelAttention, FeedForward, ModelConfig, build_model
from .prompts import (
    AttentionConfig,
    DualPromptBlock,
    PooledCrossAttention,
    SpectralGate,
    WindowCrossAttention,
    hpm_gate,
    hpm_inject,
    lpm_inject,
    lpm_spectral_gate,
)
from .tensor import Tensor, finite_diff_check

TOLERANCE = 1e-4
SUITES = ("gdd", "hpm", "lpm", "ffn", "msa", "dpb", "pipeline")


def _rand(rng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape))


def _probe(rng, shape) -> np.ndarray:
    # random readout weights make the scalar loss sensitive to every output
    return rng.standard_normal(shape)


def _check(f: Callable[[], Tensor], tensors, max_coords: int = 48, seed: int = 0) -> float:
    return finite_diff_check(f, tensors, max_coords=max_coords, seed=seed)


def _module_params(module) -> list[Tensor]:
    return [p for _, p in module.named_parameters()]


def _scramble(module, rng, scale: float = 0.5):
    """Replace the (tiny) default weights with O(1) values so every gradient is exercised.

    Attention scales stay positive and near their initial value.
    """
    for name, p in module.named_parameters():
        noise = rng.standard_normal(p.shape)
        if name.endswith("alpha") or name.endswith("temperature"):
            p.data = p.data * np.exp(0.2 * noise)
        else:
            p.data = p.data + scale * noise
    return module


def suite_gdd(seed: int) -> list[tuple[str, float]]:
    rng = T.make_rng(seed, "gradcheck.gdd")
    gdd = _scramble(GatedDynamicDecoupler(8, groups=2, k=3).initialize(seed), rng)
    x = _rand(rng, 2, 5, 5, 8)
    r_lo, r_hi = _probe(rng, x.shape), _probe(rng, x.shape)

    def f():
        pair = gdd_decompose(gdd, x, "train")
        return T.sum_(pair.lo * r_lo) + T.sum_(pair.hi * r_hi)

    out = [("gdd.input", _check(f, x, seed=seed)),
           ("gdd.params", _check(f, _module_params(gdd), seed=seed))]

    def g():
        pair = gdd_decompose(gdd, x, "eval")
        return T.sum_(pair.lo * r_lo) + T.sum_(pair.hi * r_hi)

    out.append(("gdd.eval", _check(g, [x] + _module_params(gdd), seed=seed)))
    return out


def suite_hpm(seed: int) -> list[tuple[str, float]]:
    rng = T.make_rng(seed, "gradcheck.hpm")
    x = _rand(rng, 1, 4, 4, 2)
    gw = _rand(rng, 1, 3, 3, 2, scale=0.5)
    r = _probe(rng, x.shape)
    out = [("hpm.gate", _check(lambda: T.sum_(hpm_gate(x, gw) * r), [x, gw], seed=seed))]

    p_hi = _rand(rng, 3, 3, 2)
    out.append(("hpm.inject", _check(lambda: T.sum_(hpm_inject(x, p_hi) * r), [x, p_hi], seed=seed)))

    cfg = AttentionConfig(heads=2, window=2)
    attn = _scramble(WindowCrossAttention(4, 2, cfg).initialize(seed), rng)
    f_l = _rand(rng, 1, 5, 5, 4)
    prompt = _rand(rng, 1, 5, 5, 2)
    ra = _probe(rng, f_l.shape)
    out.append(("hpm.attention", _check(lambda: T.sum_(attn(f_l, prompt) * ra),
                                        [f_l, prompt] + _module_params(attn), seed=seed)))
    return out


def suite_lpm(seed: int) -> list[tuple[str, float]]:
    rng = T.make_rng(seed, "gradcheck.lpm")
    x = _rand(rng, 1, 4, 5, 2)
    gate = _scramble(SpectralGate(2).initialize(seed), rng, 0.3)
    spec_shape = (1, 4, 3, 4)
    rs = _probe(rng, spec_shape)
    out = [("lpm.gate", _check(lambda: T.sum_(lpm_spectral_gate(x, gate) * rs),
                               [x] + _module_params(gate), seed=seed))]

    spec = _rand(rng, *spec_shape)
    p_lo = _rand(rng, 3, 3, 4)
    ri = _probe(rng, x.shape)
    out.append(("lpm.inject", _check(lambda: T.sum_(lpm_inject(spec, p_lo, 5) * ri), [spec, p_lo], seed=seed)))
    out.append(("lpm.fft_roundtrip", _check(lambda: T.sum_(irfft2(rfft2(x) * rs, 4, 5) * ri), x, seed=seed)))

    cfg = AttentionConfig(heads=2)
    attn = _scramble(PooledCrossAttention(4, 2, cfg).initialize(seed), rng)
    f_l = _rand(rng, 1, 4, 4, 4)
    prompt = _rand(rng, 1, 4, 4, 2)
    ra = _probe(rng, (1, 4, 4, 2))
    out.append(("lpm.attention", _check(lambda: T.sum_(attn(f_l, prompt) * ra),
                                        [f_l, prompt] + _module_params(attn), seed=seed)))
    return out


def suite_ffn(seed: int) -> list[tuple[str, float]]:
    rng = T.make_rng(seed, "gradcheck.ffn")
    ffn = _scramble(FeedForward(4, 3.0).initialize(seed), rng)
    x = _rand(rng, 1, 4, 4, 4)
    r = _probe(rng, x.shape)
    return [("ffn", _check(lambda: T.sum_(ffn(x) * r), [x] + _module_params(ffn), seed=seed))]


def suite_msa(seed: int) -> list[tuple[str, float]]:
    rng = T.make_rng(seed, "gradcheck.msa")
    msa = _scramble(ChannelAttention(8, 2).initialize(seed), rng)
    x = _rand(rng, 1, 4, 4, 8)
    r = _probe(rng, x.shape)
    return [("msa", _check(lambda: T.sum_(msa(x) * r), [x] + _module_params(msa), seed=seed))]


def suite_dpb(seed: int) -> list[tuple[str, float]]:
    rng = T.make_rng(seed, "gradcheck.dpb")
    block = _scramble(DualPromptBlock(4, 2, (4, 4), AttentionConfig(heads=2, window=2)).initialize(seed), rng)
    f_l = _rand(rng, 1, 4, 4, 4)
    lo, hi = _rand(rng, 1, 4, 4, 2), _rand(rng, 1, 4, 4, 2)
    r_hi, r_lo = _probe(rng, (1, 4, 4, 4)), _probe(rng, (1, 4, 4, 2))

    def f():
        a, b = block(f_l, FrequencyPair(lo, hi))
        return T.sum_(a * r_hi) + T.sum_(b * r_lo)

    return [("dpb", _check(f, [f_l, lo, hi] + _module_params(block), max_coords=24, seed=seed))]


def suite_pipeline(seed: int) -> list[tuple[str, float]]:
    rng = T.make_rng(seed, "gradcheck.pipeline")
    cfg = ModelConfig.micro(patch=16)
    # the output conv starts at zero, which would hide every upstream gradient
    model = _scramble(build_model(cfg, seed), rng, 0.2)
    x = Tensor(rng.uniform(0, 1, size=(2, 16, 16, 3)))
    model.train()

    def f():
        return T.sum_(model(x))

    params = _module_params(model)
    # probe a few coordinates in every parameter tensor
    err = max(_check(f, x, max_coords=24, seed=seed), _check(f, params, max_coords=2, seed=seed))
    return [("pipeline", err)]


_SUITES = {"gdd": suite_gdd, "hpm": suite_hpm, "lpm": suite_lpm, "ffn": suite_ffn,
           "msa": suite_msa, "dpb": suite_dpb, "pipeline": suite_pipeline}


def run(module: str = "all", seed: int = 0) -> list[tuple[str, float]]:
    """``(operator, max_rel_error)`` for each operator in the chosen suite(s)."""
    names = SUITES if module == "all" else (module,)
    for n in names:
        if n not in _SUITES:
            raise KeyError(n)
    return [(name, float(err)) for n in names for name, err in _SUITES[n](seed)]

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpro import tensor as T
from fpro.model import (
    ChannelAttention,
    FeedForward,
    ImageTooSmall,
    ModelConfig,
    build_model,
    ffn_forward,
    fpro_forward,
    msa_forward,
    param_breakdown,
    param_count,
)
from fpro.tensor import ShapeError, Tensor


def scramble(module, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return module


# -- scalar-loop building blocks --------------------------------------------------

def ln_loop(x, w, b, eps=1e-5):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        v = x[idx]
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        out[idx] = [(a - mu) / math.sqrt(var + eps) * w[i] + b[i] for i, a in enumerate(v)]
    return out


def dw_zero_loop(x, k):
    _, h, w, c = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            for p in range(3):
                for q in range(3):
                    y, z = i + p - 1, j + q - 1
                    if 0 <= y < h and 0 <= z < w:
                        out[0, i, j] += x[0, y, z] * k[p, q]
    return out


def gelu(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


def test_ffn_matches_loop(rng):
    ffn = scramble(FeedForward(4, 3.0).initialize(0), 1)
    x = rng.standard_normal((1, 3, 3, 4))
    h = ln_loop(x, ffn.norm.weight.data, ffn.norm.bias.data) @ ffn.project_in.weight.data
    h = dw_zero_loop(h, ffn.dwconv.weight.data[0])
    gated = np.vectorize(gelu)(h[..., :12]) * h[..., 12:]
    want = x + gated @ ffn.project_out.weight.data
    assert np.allclose(ffn_forward(Tensor(x), ffn).data, want, rtol=0, atol=1e-10)


def test_ffn_residual_bypass_and_zero_input(rng):
    ffn = scramble(FeedForward(4).initialize(0), 2)
    ffn.project_out.weight.data[:] = 0
    x = rng.standard_normal((1, 5, 5, 4))
    assert np.array_equal(ffn(Tensor(x)).data, x)
    out = scramble(FeedForward(4).initialize(0), 3)(Tensor(np.zeros((1, 4, 4, 4)))).data
    assert np.all(np.isfinite(out))
    with pytest.raises(ShapeError):
        ffn_forward(Tensor(x[..., :3]), ffn)


def msa_loop(mod, x):
    _, h, w, c = x.shape
    heads = mod.heads
    d = c // heads
    y = ln_loop(x, mod.norm.weight.data, mod.norm.bias.data) @ mod.qkv.weight.data
    y = dw_zero_loop(y, mod.qkv_dw.weight.data[0])[0].reshape(h * w, 3 * c)
    q, k, v = y[:, :c], y[:, c:2 * c], y[:, 2 * c:]
    out = np.zeros((h * w, c))
    for hd in range(heads):
        cols = range(hd * d, (hd + 1) * d)
        qn = {i: q[:, i] / math.sqrt(sum(a * a for a in q[:, i]) + 1e-12) for i in cols}
        kn = {j: k[:, j] / math.sqrt(sum(a * a for a in k[:, j]) + 1e-12) for j in cols}
        for i in cols:
            logits = np.array([float(qn[i] @ kn[j]) * mod.temperature.data[hd] for j in cols])
            a = np.exp(logits - logits.max())
            a /= a.sum()
            out[:, i] = sum(a[jj] * v[:, j] for jj, j in enumerate(cols))
    return x + (out @ mod.proj.weight.data).reshape(1, h, w, c)


def test_msa_matches_loop(rng):
    mod = scramble(ChannelAttention(8, 2).initialize(0), 4)
    mod.temperature.data = np.array([0.8, 1.7])
    x = rng.standard_normal((1, 4, 4, 8))
    assert np.allclose(msa_forward(Tensor(x), mod, 2).data, msa_loop(mod, x), rtol=0, atol=1e-10)


def test_msa_properties(rng):
    mod = scramble(ChannelAttention(8, 4).initialize(0), 5, 2.0)
    x = rng.standard_normal((2, 5, 3, 8))
    attn, _ = mod.attention_map(Tensor(x))
    assert attn.shape == (2, 4, 2, 2)
    assert np.allclose(attn.data.sum(-1), 1, atol=1e-6)
    mod.qkv.weight.data[:, 16:] = 0  # value projection off
    assert np.array_equal(mod(Tensor(x)).data, x)
    with pytest.raises(ShapeError):
        msa_forward(Tensor(x), mod, heads=2)
    with pytest.raises(ShapeError):
        ChannelAttention(6, 4)


# -- whole network -------------------------------------------------------------------

@pytest.fixture(scope="module")
def micro():
    return scramble(build_model(ModelConfig.micro(), 0), 7, 0.05)


def test_residual_identity_any_config(rng):
    for cfg in [ModelConfig.micro(), ModelConfig.micro(use_hpm=False), ModelConfig.micro(single_gdd=False),
                ModelConfig.micro(use_hpm=False, use_lpm=False)]:
        model = scramble(build_model(cfg, 3), 9, 0.1)
        model.output.weight.data[:] = 0
        model.output.bias.data[:] = 0
        x = rng.uniform(0, 1, (1, 16, 16, 3))
        assert np.array_equal(fpro_forward(model, x, "train").data, x)


def test_fresh_model_starts_at_identity(rng):
    model = build_model(ModelConfig.micro(), 0)
    x = rng.uniform(0, 1, (12, 20, 3))
    assert np.array_equal(fpro_forward(model, x).data, x)


@settings(max_examples=10)
@given(st.integers(4, 40), st.integers(4, 40))
def test_shape_contract(h, w):
    model = scramble(build_model(ModelConfig.micro(patch=16), 0), 1, 0.05)
    x = np.random.default_rng(h * 41 + w).uniform(0, 1, (h, w, 3))
    out = fpro_forward(model, x).data
    assert out.shape == (h, w, 3)
    assert out.min() >= 0 and out.max() <= 1


def test_train_mode_is_unclamped(micro, rng):
    x = rng.uniform(0.95, 1, (1, 8, 8, 3))
    micro.output.bias.data[:] = 0.3
    try:
        assert fpro_forward(micro, x, "train").data.max() > 1
        assert fpro_forward(micro, x, "eval").data.max() <= 1
    finally:
        micro.output.bias.data[:] = 0


def test_input_errors(micro):
    with pytest.raises(ImageTooSmall):
        fpro_forward(micro, np.zeros((3, 8, 3)))
    with pytest.raises(ShapeError):
        fpro_forward(micro, np.zeros((8, 8, 4)))
    with pytest.raises(ValueError):
        fpro_forward(micro, np.zeros((8, 8, 3)), "infer")


def test_micro_pipeline_gradient(rng):
    model = scramble(build_model(ModelConfig.micro(patch=16), 2), 11, 0.2)
    x = Tensor(rng.uniform(0, 1, (1, 16, 16, 3)))
    model.train()
    params = [p for _, p in model.named_parameters()]
    err = max(T.finite_diff_check(lambda: T.sum_(model(x)), x, max_coords=12),
              T.finite_diff_check(lambda: T.sum_(model(x)), params, max_coords=1))
    assert err < 1e-4


def test_determinism(rng):
    x = rng.uniform(0, 1, (20, 24, 3))
    a = fpro_forward(scramble(build_model(ModelConfig.micro(), 5), 1, 0.05), x).data
    b = fpro_forward(scramble(build_model(ModelConfig.micro(), 5), 1, 0.05), x).data
    assert a.tobytes() == b.tobytes()
    c = fpro_forward(build_model(ModelConfig.micro(), 5, np.float32), x).data
    assert c.dtype == np.float32


def test_ablation_matches_prompt_free_model(rng):
    off = build_model(ModelConfig.micro(use_hpm=False, use_lpm=False), 4)
    assert not any(n.startswith(("gdds", "prompts", "fusions")) for n, _ in off.named_parameters())
    full = build_model(ModelConfig.micro(), 4)
    shared = dict(full.named_parameters())
    # backbone parameters are seeded by name, so they coincide with the full model
    for name, p in off.named_parameters():
        assert np.array_equal(p.data, shared[name].data)
    # a manual prompt-free backbone built from the same tensors agrees bit-for-bit
    scramble(off, 6, 0.1)
    x = rng.uniform(0, 1, (1, 16, 16, 3))
    out = fpro_forward(off, x, "train").data

    def backbone(model, image):
        f_s = model.shallow(Tensor(image))
        feat, skips = f_s, []
        for lvl in range(3):
            for blk in model.encoders[lvl]:
                feat = blk(feat)
            if lvl < 2:
                skips.append(feat)
                feat = model.downs[lvl](feat)
        for lvl in (2, 1, 0):
            if lvl < 2:
                feat = model.skips[lvl](T.concat([model.ups[lvl](feat), skips[lvl]], axis=-1))
            for blk in model.decoders[lvl]:
                feat = blk(feat)
        return image + model.output(feat).data

    assert np.array_equal(out, backbone(off, x))


# -- parameter ledger ------------------------------------------------------------------

def micro_ledger(c=8, patch=64, heads=(1, 2, 2), exp=3, groups=8, k=3):
    """Hand-written layer-shape ledger for a one-block-per-level model."""
    total = 3 * 3 * 3 * c + c                      # shallow conv
    total += 3 * 3 * c * 3 + 3                     # output conv
    ffn = lambda w: 2 * w + w * 2 * exp * w + 9 * 2 * exp * w + exp * w * w
    msa = lambda w, h: h + 2 * w + w * 3 * w + 9 * 3 * w + w * w
    for lvl in range(3):
        w = c * 2 ** lvl
        p = patch // 2 ** lvl
        total += ffn(w)                            # encoder block
        total += msa(w, heads[lvl]) + ffn(w)       # decoder block
        if lvl < 2:
            total += 4 * w * 2 * w                 # unshuffle + 1x1
            total += 2 * w * 4 * w                 # 1x1 + shuffle (from 2w)
            total += 2 * w * w                     # skip fusion
        hpm = 9 * c + p * p * c + 9 * c + (w * w + w) + 2 * (c * w + w) + (w * w + w)
        lpm = p * (p // 2 + 1) * 2 * c + (2 * c * 2 * c + 2 * c) + heads[lvl] + 4 * (c * c + c)
        if lvl:
            lpm += w * c - c * c                   # query comes from the wider decoder feature
        total += hpm + lpm + (w + w + c) * w       # prompt fusion
    gk = groups * k * k
    total += c * gk + gk * gk + 2 * gk             # decoupler
    return total


def test_micro_param_ledger():
    assert micro_ledger() == 146_701
    assert param_count(ModelConfig.micro()) == micro_ledger()
    model = build_model(ModelConfig.micro(), 0)
    assert sum(param_breakdown(model).values()) == 146_701


def test_doubling_width_roughly_quadruples_backbone():
    a = param_count(ModelConfig.micro(use_hpm=False, use_lpm=False, channels=16, heads=(1, 2, 2)))
    b = param_count(ModelConfig.micro(use_hpm=False, use_lpm=False, channels=32, heads=(1, 2, 2)))
    assert 3.6 < b / a < 4.1


def test_default_param_count_near_reference():
    n = param_count(ModelConfig())
    assert abs(n - 22.3e6) / 22.3e6 < 0.20


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(blocks=(1, 1))
    with pytest.raises(ValueError):
        ModelConfig(channels=12, groups=8)
    with pytest.raises(ValueError):
        ModelConfig(kernel=4)
    cfg = ModelConfig.micro(use_lpm=False)
    assert ModelConfig.from_items(cfg.to_items()) == cfg
    with pytest.raises(KeyError):
        ModelConfig.from_items({"depth": "3"})

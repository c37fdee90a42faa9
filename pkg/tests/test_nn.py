import numpy as np
import pytest

from fpro import nn
from fpro import tensor as T
from fpro.tensor import ShapeError, Tensor, finite_diff_check


def loop_depthwise(x, kernel, padding):
    """Quadruple loop over pixels, channels and taps; ``kernel`` is [B,k,k,C]."""
    n, h, w, c = x.shape
    k = kernel.shape[1]
    r = k // 2
    mode = {"zeros": "constant", "reflect": "reflect", "circular": "wrap"}[padding]
    xp = np.pad(x, [(0, 0), (r, r), (r, r), (0, 0)], mode=mode)
    out = np.zeros_like(x)
    for b in range(n):
        kb = kernel[b if kernel.shape[0] > 1 else 0]
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    acc = 0.0
                    for p in range(k):
                        for q in range(k):
                            acc += xp[b, i + p, j + q, ch] * kb[p, q, ch]
                    out[b, i, j, ch] = acc
    return out


@pytest.mark.parametrize("padding", ["zeros", "reflect", "circular"])
@pytest.mark.parametrize("per_image", [False, True])
def test_depthwise_matches_loop(padding, per_image, rng):
    x = rng.standard_normal((2, 5, 6, 3))
    kern = rng.standard_normal((2 if per_image else 1, 3, 3, 3))
    got = nn.depthwise_conv(Tensor(x), Tensor(kern), padding).data
    assert np.allclose(got, loop_depthwise(x, kern, padding), rtol=0, atol=1e-12)


def test_depthwise_five_tap(rng):
    x, kern = rng.standard_normal((1, 7, 7, 2)), rng.standard_normal((1, 5, 5, 2))
    assert np.allclose(nn.depthwise_conv(Tensor(x), Tensor(kern), "reflect").data,
                       loop_depthwise(x, kern, "reflect"), atol=1e-12)


def test_depthwise_rejects_bad_kernels():
    x = Tensor(np.zeros((1, 4, 4, 2)))
    with pytest.raises(ShapeError):
        nn.depthwise_conv(x, Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ShapeError):
        nn.depthwise_conv(x, Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("padding", ["zeros", "reflect", "circular"])
def test_depthwise_gradients(padding, rng):
    x = Tensor(rng.standard_normal((2, 4, 5, 2)))
    kern = Tensor(rng.standard_normal((2, 3, 3, 2)))
    shared = Tensor(rng.standard_normal((1, 3, 3, 2)))
    r = rng.standard_normal((2, 4, 5, 2))
    assert finite_diff_check(lambda: T.sum_(nn.depthwise_conv(x, kern, padding) * r), [x, kern]) < 1e-7
    assert finite_diff_check(lambda: T.sum_(nn.depthwise_conv(x, shared, padding) * r), [x, shared]) < 1e-7


def test_dense_conv_matches_loop(rng):
    x = rng.standard_normal((1, 5, 4, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    b = rng.standard_normal(2)
    xp = np.pad(x, [(0, 0), (1, 1), (1, 1), (0, 0)])
    want = np.zeros((1, 5, 4, 2))
    for i in range(5):
        for j in range(4):
            for o in range(2):
                want[0, i, j, o] = b[o] + sum(xp[0, i + p, j + q, c] * w[p, q, c, o]
                                              for p in range(3) for q in range(3) for c in range(3))
    assert np.allclose(nn.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, want, atol=1e-12)


def test_dense_conv_gradient(rng):
    x = Tensor(rng.standard_normal((1, 4, 4, 2)))
    w = Tensor(rng.standard_normal((3, 3, 2, 3)))
    r = rng.standard_normal((1, 4, 4, 3))
    assert finite_diff_check(lambda: T.sum_(nn.conv2d(x, w, padding="reflect") * r), [x, w]) < 1e-7


def test_layer_norm_matches_formula(rng):
    x = rng.standard_normal((2, 3, 5))
    ln = nn.LayerNorm(5).initialize(0)
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    assert np.allclose(ln(Tensor(x)).data, (x - mu) / np.sqrt(var + 1e-5), atol=1e-12)


def test_batchnorm_train_and_eval(rng):
    bn = nn.BatchNorm(3).initialize(0)
    x = rng.standard_normal((4, 3)) * 2 + 1
    out = bn(Tensor(x)).data
    assert np.allclose(out.mean(0), 0, atol=1e-12)
    assert np.allclose(bn.running_mean, 0.1 * x.mean(0))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * x.var(0, ddof=1))
    bn.eval()
    y = bn(Tensor(x)).data
    assert np.allclose(y, (x - bn.running_mean) / np.sqrt(bn.running_var + 1e-5))


def test_module_registry_and_named_init():
    class Pair(nn.Module):
        def __init__(self):
            super().__init__()
            self.a = nn.Conv1x1(3, 4)
            self.b = nn.ModuleList([nn.Conv1x1(4, 4, bias=True)])

    names = [n for n, _ in Pair().named_parameters()]
    assert names == ["a.weight", "b.0.weight", "b.0.bias"]
    one, two = Pair().initialize(5), Pair().initialize(5)
    assert np.array_equal(one.a.weight.data, two.a.weight.data)
    # streams are keyed by name, so the same layer gets the same draw in a different container
    solo = nn.Module()
    solo.a = nn.Conv1x1(3, 4)
    solo.initialize(5)
    assert np.array_equal(solo.a.weight.data, one.a.weight.data)


def test_trunc_normal_is_bounded():
    x = nn.trunc_normal(0.02)(np.random.default_rng(0), (10000,))
    assert np.abs(x).max() <= 0.04 and abs(x.std() - 0.0176) < 0.002

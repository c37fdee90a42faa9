import math

import numpy as np
import pytest

from fpro.metrics import PSNR_CAP, gaussian_window, psnr, ssim, to_y


def test_psnr_closed_form():
    a, b = np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.1)
    assert abs(psnr(a, b) - 20.0) < 0.01
    assert abs(psnr(a, b, "y") - 20.0) < 1e-9  # luma weights sum to one


def test_identical_images(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    assert psnr(a, a) == PSNR_CAP and psnr(a, a, "y") == PSNR_CAP
    assert ssim(a, a) == 1.0 and ssim(a, a, "y") == 1.0
    b = a.copy()
    b[0, 0, 0] += 1e-9
    assert psnr(a, b) == PSNR_CAP


def test_luma_weights():
    assert np.allclose(to_y(np.eye(3).reshape(1, 3, 3)), [[0.299, 0.587, 0.114]])


def naive_ssim_channel(a, b):
    """Direct sliding-window SSIM with explicit sums over each 11x11 patch."""
    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5 ** 2)) for i in range(11)]
    s = sum(g)
    g = [v / s for v in g]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = a.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            wts = np.array([[g[p] * g[q] for q in range(11)] for p in range(11)])
            ma, mb = (wts * pa).sum(), (wts * pb).sum()
            va = (wts * (pa - ma) ** 2).sum()
            vb = (wts * (pb - mb) ** 2).sum()
            cov = (wts * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


@pytest.mark.parametrize("seed", range(10))
def test_ssim_matches_naive(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (14, 16, 3))
    b = np.clip(a + rng.normal(0, 0.1 + 0.05 * seed, a.shape), 0, 1)
    want = np.mean([naive_ssim_channel(a[..., c], b[..., c]) for c in range(3)])
    assert abs(ssim(a, b) - want) < 1e-8


def test_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11) and abs(w.sum() - 1) < 1e-15 and w[5, 5] == w.max()


def test_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), "lab")

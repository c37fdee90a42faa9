import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpro.nn import Parameter
from fpro.optim import AdamW, adamw_step, cosine_lr


def single(value):
    p = Parameter((1,))
    p.data = np.array([float(value)])
    return p, AdamW([("p", p)], weight_decay=0.0)


def test_first_step_moves_by_lr():
    p, opt = single(1.0)
    adamw_step(opt, {"p": np.array([1.0])}, 0.1)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert p.data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_two_steps_by_hand():
    p, opt = single(0.5)
    adamw_step(opt, {"p": np.array([2.0])}, 0.01)
    adamw_step(opt, {"p": np.array([-1.0])}, 0.01)
    m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
    v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    want = 0.5 - 0.01 * 2 / (2 + 1e-8) - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(want, abs=1e-14)


def test_zero_grad_zero_decay_is_fixed_point():
    p, opt = single(3.0)
    for _ in range(5):
        adamw_step(opt, {"p": np.zeros(1)}, 0.1)
    assert p.data[0] == 3.0


def test_decay_only_shrinks_monotonically():
    p, opt = single(-2.0)
    opt.weight_decay = 0.1
    seen = [abs(p.data[0])]
    for _ in range(10):
        adamw_step(opt, {"p": np.zeros(1)}, 0.05)
        seen.append(abs(p.data[0]))
    assert all(b < a for a, b in zip(seen, seen[1:]))
    assert seen[1] == pytest.approx(2.0 * (1 - 0.005))


def test_missing_grad_counts_as_zero():
    p, opt = single(1.0)
    opt.update(0.1)
    assert p.data[0] == 1.0 and opt.step == 1


def test_lr_endpoints():
    assert cosine_lr(0, 2000) == 3e-4
    assert cosine_lr(2000, 2000) == pytest.approx(1e-6, abs=1e-20)
    assert cosine_lr(1000, 2000) == pytest.approx((3e-4 + 1e-6) / 2, rel=1e-12)


@given(st.integers(1, 5000))
def test_lr_monotone_and_bounded(total):
    lrs = [cosine_lr(i, total) for i in range(0, total + 1, max(1, total // 50))]
    assert all(1e-6 - 1e-18 <= v <= 3e-4 for v in lrs)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_lr_errors():
    with pytest.raises(ValueError):
        cosine_lr(11, 10)
    with pytest.raises(ValueError):
        cosine_lr(-1, 10)

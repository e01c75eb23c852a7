"""AdamW against a hand-stepped reference."""

import numpy as np
import pytest

from compoundmotion.autodiff import Parameter
from compoundmotion.optim import AdamW


def ref_adamw(p0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    """Textbook AdamW in float64, one value at a time."""
    p = float(p0)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p = p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
    return p


def make_param(value):
    return Parameter(np.asarray(value, dtype=np.float32))


def test_first_step_is_signed_lr():
    # classic Adam property: first update magnitude ~= lr regardless of grad scale
    for g in (0.5, 3.0, -200.0):
        p = make_param([1.0])
        opt = AdamW({"p": p}, lr=0.1)
        p.grad = np.array([g], dtype=np.float32)
        opt.step()
        expect = 1.0 - 0.1 * np.sign(g)
        assert abs(p.data[0] - expect) < 1e-6


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_matches_scalar_reference(wd):
    grads = [0.5, -0.25, 1.5, 0.03, -0.9]
    p = make_param([1.0])
    opt = AdamW({"p": p}, lr=0.05, weight_decay=wd)
    for g in grads:
        p.grad = np.array([g], dtype=np.float32)
        opt.step()
    expect = ref_adamw(1.0, grads, lr=0.05, wd=wd)
    assert abs(float(p.data[0]) - expect) < 1e-6


def test_decay_is_decoupled_from_moments():
    # the moment estimates must be identical with and without weight decay;
    # only the parameter trajectory differs
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal(4).astype(np.float32) for _ in range(6)]
    runs = {}
    for wd in (0.0, 0.5):
        p = make_param(np.ones(4))
        opt = AdamW({"p": p}, lr=0.01, weight_decay=wd)
        for g in grads:
            p.grad = g
            opt.step()
        runs[wd] = (opt._m["p"].copy(), opt._v["p"].copy(), p.data.copy())
    np.testing.assert_array_equal(runs[0.0][0], runs[0.5][0])
    np.testing.assert_array_equal(runs[0.0][1], runs[0.5][1])
    assert not np.array_equal(runs[0.0][2], runs[0.5][2])


def test_none_grad_skips_param():
    a = make_param([1.0])
    b = make_param([1.0])
    opt = AdamW({"a": a, "b": b}, lr=0.1)
    a.grad = np.array([1.0], dtype=np.float32)
    b.grad = None
    opt.step()
    assert a.data[0] != 1.0
    assert b.data[0] == 1.0
    assert np.all(opt._m["b"] == 0.0) and np.all(opt._v["b"] == 0.0)


def test_zero_grad_clears():
    p = make_param([1.0])
    opt = AdamW({"p": p})
    p.grad = np.array([1.0], dtype=np.float32)
    opt.zero_grad()
    assert p.grad is None


def test_bad_lr_rejected():
    with pytest.raises(ValueError, match="learning rate"):
        AdamW({"p": make_param([1.0])}, lr=0.0)


def test_updates_stay_float32():
    p = make_param(np.ones((3, 2)))
    opt = AdamW({"p": p}, lr=0.01, weight_decay=0.1)
    p.grad = np.ones((3, 2), dtype=np.float32)
    opt.step()
    assert p.data.dtype == np.float32

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from papa.optim import (
    ScheduleSpec,
    SwaState,
    adamw_step,
    lr_at,
    make_optimizer,
    sgd_step,
    swa_accumulate,
)


def test_cosine_endpoints_and_midpoint():
    s = ScheduleSpec("cosine", 0.1, 1e-4, 1000)
    assert lr_at(s, 0) == pytest.approx(0.1)
    assert lr_at(s, 1000) == pytest.approx(1e-4)
    assert lr_at(s, 500) == pytest.approx(0.05005)


def test_multistep_decay_by_epoch():
    s = ScheduleSpec("multistep", 0.1, 1e-4, 300, milestones=(150, 225), factor=0.1)
    assert lr_at(s, 149) == pytest.approx(0.1)
    assert lr_at(s, 200) == pytest.approx(0.01)
    assert lr_at(s, 300) == pytest.approx(0.001)


def test_restarts_and_linear():
    s = ScheduleSpec("cosine_restarts", 0.1, 1e-3, 100, period=25)
    assert lr_at(s, 25) == pytest.approx(0.1)
    assert lr_at(s, 24) < lr_at(s, 1)
    assert lr_at(s, 100) == pytest.approx(1e-3)
    lin = ScheduleSpec("linear", 1.0, 0.5, 10)
    assert lr_at(lin, 5) == pytest.approx(0.75)


def test_schedule_errors():
    s = ScheduleSpec("cosine", 0.1, 1e-4, 10)
    with pytest.raises(ValueError):
        lr_at(s, 11)
    with pytest.raises(ValueError):
        lr_at(s, -1)
    with pytest.raises(ValueError):
        ScheduleSpec("cosine", 1e-5, 1e-4, 10)
    with pytest.raises(ValueError):
        ScheduleSpec("warmup")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["cosine", "multistep", "linear", "constant"]), st.integers(1, 400))
def test_schedules_non_increasing(kind, total):
    s = ScheduleSpec(kind, 0.1, 1e-4, total, milestones=(total // 3, total // 2))
    vals = [lr_at(s, t) for t in range(total + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_sgd_zero_lr_and_decay_only():
    p = np.array([1.0, -2.0], dtype=np.float32)
    st_ = make_optimizer("sgd", p, momentum=0.9, weight_decay=1e-4)
    sgd_step(p, np.array([3.0, 4.0], np.float32), st_, 0.0)
    assert np.array_equal(p, [1.0, -2.0])

    p = np.array([1.0, -2.0])
    st_ = make_optimizer("sgd", p, momentum=0.0, weight_decay=1e-4)
    sgd_step(p, np.zeros(2), st_, 0.1)
    assert np.allclose(p, np.array([1.0, -2.0]) * (1 - 1e-5), rtol=0, atol=1e-15)


def test_sgd_quadratic_closed_form():
    p = np.array([1.0])
    s = make_optimizer("sgd", p, momentum=0.0, weight_decay=0.0)
    for _ in range(100):
        sgd_step(p, p.copy(), s, 0.1)
    assert p[0] == pytest.approx(0.9**100, rel=1e-12)
    assert p[0] == pytest.approx(2.66e-5, rel=1e-2)


def test_sgd_momentum_recurrence():
    p = np.array([1.0])
    s = make_optimizer("sgd", p, momentum=0.9, weight_decay=1e-2)
    theta, v = 1.0, 0.0
    for _ in range(20):
        g = 2 * theta
        sgd_step(p, np.array([2 * p[0]]), s, 0.05)
        theta -= 0.05 * 1e-2 * theta
        v = 0.9 * v + g
        theta -= 0.05 * v
    assert p[0] == pytest.approx(theta, rel=1e-12)


def test_sgd_mask_excludes_entries():
    p = np.array([1.0, 1.0])
    mask = np.array([True, False])
    s = make_optimizer("sgd", p, mask=mask, momentum=0.0, weight_decay=0.5)
    sgd_step(p, np.zeros(2), s, 0.1)
    assert p[0] == pytest.approx(0.95) and p[1] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(0, 1))
def test_plain_sgd_equals_gradient_descent(vals, lr):
    p = np.array(vals)
    g = np.linspace(-1, 1, p.size)
    expected = p - lr * g
    sgd_step(p, g, make_optimizer("sgd", p, momentum=0.0, weight_decay=0.0), lr)
    assert np.array_equal(p, expected)


def test_sgd_rejects_non_finite():
    p = np.zeros(2)
    with pytest.raises(FloatingPointError):
        sgd_step(p, np.array([np.nan, 0.0]), make_optimizer("sgd", p), 0.1)
    with pytest.raises(ValueError):
        sgd_step(p, np.zeros(3), make_optimizer("sgd", p), 0.1)


def test_adamw_zero_grad_and_first_step():
    p = np.array([0.5, -0.5])
    adamw_step(p, np.zeros(2), make_optimizer("adamw", p, weight_decay=0.0), 1e-2)
    assert np.array_equal(p, [0.5, -0.5])
    p = np.array([0.5, -0.5])
    adamw_step(p, np.array([3.0, -1e-3]), make_optimizer("adamw", p, weight_decay=0.0), 1e-2)
    assert np.allclose(p, [0.5 - 1e-2, -0.5 + 1e-2], atol=1e-6)


def _adamw_scalar(theta, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = theta  # L = theta^2 / 2
        theta = theta - lr * wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adamw_matches_scalar_oracle():
    p = np.array([2.0])
    s = make_optimizer("adamw", p, weight_decay=1e-2)
    for _ in range(50):
        adamw_step(p, p.copy(), s, 0.05)
    # gradient is taken before decay in both implementations
    ref = 2.0
    m = v = 0.0
    for t in range(1, 51):
        g = ref
        ref -= 0.05 * 1e-2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(p[0] - ref) < 1e-10
    assert _adamw_scalar(2.0, 50, 0.05, 1e-2) == pytest.approx(ref, abs=1e-12)


def test_swa_examples():
    s = swa_accumulate(SwaState(), np.array([3.0, 4.0]))
    assert np.array_equal(s.mean, [3.0, 4.0]) and s.n == 1
    s = SwaState()
    for _ in range(7):
        s = swa_accumulate(s, np.array([0.1, 0.2], dtype=np.float32))
    assert np.allclose(s.mean, np.array([0.1, 0.2], dtype=np.float32), atol=1e-7)
    s = SwaState()
    for v in ([0.0], [1.0], [2.0]):
        s = swa_accumulate(s, np.array(v))
    assert s.mean[0] == pytest.approx(1.0) and s.n == 3
    with pytest.raises(ValueError):
        swa_accumulate(s, np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10**6))
def test_swa_is_arithmetic_mean(k, seed):
    vecs = np.random.default_rng(seed).normal(size=(k, 5)).astype(np.float32)
    s = SwaState()
    for v in vecs:
        s = swa_accumulate(s, v)
    assert np.max(np.abs(s.mean - vecs.astype(np.float64).mean(0))) < 1e-6

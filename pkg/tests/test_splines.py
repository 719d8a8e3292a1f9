from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rq_scalar
from splitbg.autodiff import Tensor
from splitbg.splines import (
    MIN_BIN_HEIGHT,
    MIN_BIN_WIDTH,
    circular_rqs,
    n_raw_params,
    rqs,
    spline_knots,
)

K = 8
P = n_raw_params(K)


def raw_params(seed, n, scale=1.5):
    return np.random.default_rng(seed).normal(0.0, scale, (n, P))


def test_parameter_count():
    assert n_raw_params(8) == 25 and n_raw_params(1) == 4


def test_zero_parameters_give_identity():
    x = np.linspace(-4.9, 4.9, 11)
    y, ld = rqs(x, np.zeros((11, P)), K, 5.0)
    assert np.allclose(y.value, x, atol=1e-12) and np.allclose(ld.value, 0.0, atol=1e-12)
    a = np.linspace(-3.1, 3.1, 11)
    y, ld = circular_rqs(a, np.zeros((11, P)), K)
    assert np.allclose(y.value, a, atol=1e-12) and np.allclose(ld.value, 0.0, atol=1e-12)


def test_knots_span_interval_and_respect_minimum_sizes():
    xk, yk, dk = spline_knots(raw_params(0, 4, scale=8.0), K, -2.0, 3.0)
    for k in (xk.value, yk.value):
        assert np.allclose(k[:, 0], -2.0) and np.allclose(k[:, -1], 3.0)
    assert np.all(np.diff(xk.value) >= MIN_BIN_WIDTH * 5.0 * (1 - 1e-9))
    assert np.all(np.diff(yk.value) >= MIN_BIN_HEIGHT * 5.0 * (1 - 1e-9))
    assert np.all(dk.value > 0)


def test_forward_matches_scalar_oracle():
    raw = raw_params(1, 50)
    x = np.random.default_rng(2).uniform(-5, 5, 50)
    y, ld = rqs(x, raw, K, 5.0)
    xk, yk, dk = (t.value for t in spline_knots(raw, K, -5.0, 5.0))
    for i in range(50):
        yo, lo = rq_scalar(x[i], xk[i], yk[i], dk[i])
        assert abs(y.value[i] - yo) < 1e-12 and abs(ld.value[i] - lo) < 1e-10


def test_tails_are_identity():
    raw = raw_params(3, 4)
    x = np.array([-7.0, -5.5, 5.5, 9.0])
    y, ld = rqs(x, raw, K, 5.0)
    assert np.array_equal(y.value, x) and np.array_equal(ld.value, np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-6.0, 6.0))
def test_interval_round_trip(seed, x):
    raw = raw_params(seed, 1)
    y, ld = rqs(np.array([x]), raw, K, 5.0)
    back, ld_inv = rqs(y.value, raw, K, 5.0, inverse=True)
    assert abs(back.value[0] - x) < 1e-10
    assert abs(ld.value[0] + ld_inv.value[0]) < 1e-8


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-np.pi, np.pi - 1e-9))
def test_circular_round_trip(seed, a):
    raw = raw_params(seed, 1)
    y, ld = circular_rqs(np.array([a]), raw, K)
    back, ld_inv = circular_rqs(y.value, raw, K, inverse=True)
    d = (back.value[0] - a + np.pi) % (2 * np.pi) - np.pi
    assert abs(d) < 1e-10 and abs(ld.value[0] + ld_inv.value[0]) < 1e-8
    assert -np.pi <= y.value[0] < np.pi


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone(seed):
    x = np.linspace(-5, 5, 401)
    raw = np.repeat(raw_params(seed, 1), len(x), axis=0)
    y, _ = rqs(x, raw, K, 5.0)
    assert np.all(np.diff(y.value) > 0)


def test_logdet_matches_finite_difference_derivative():
    raw = raw_params(4, 200)
    x = np.random.default_rng(5).uniform(-4.9, 4.9, 200)
    h = 1e-6
    yp, _ = rqs(x + h, raw, K, 5.0)
    ym, _ = rqs(x - h, raw, K, 5.0)
    _, ld = rqs(x, raw, K, 5.0)
    num = np.log((yp.value - ym.value) / (2 * h))
    assert np.max(np.abs(ld.value - num)) < 1e-6


def test_circular_map_is_c1_across_the_seam():
    raw = raw_params(6, 1)
    eps = 1e-7
    lo, ld_lo = circular_rqs(np.array([-np.pi + eps]), raw, K)
    hi, ld_hi = circular_rqs(np.array([np.pi - eps]), raw, K)
    assert abs(lo.value[0] + np.pi) < 1e-5 and abs(hi.value[0] - np.pi) < 1e-5
    assert abs(ld_lo.value[0] - ld_hi.value[0]) < 1e-5


def test_spline_gradient_wrt_parameters():
    from splitbg.autodiff import finite_diff_check

    x = np.random.default_rng(7).uniform(-4, 4, 3)
    raw = raw_params(8, 3).ravel()

    def f(r):
        y, ld = rqs(Tensor(x), r.reshape((3, P)), K, 5.0)
        return (y * y).sum() + ld.sum()

    assert finite_diff_check(f, raw, h=1e-6) < 1e-4

"""Autodiff engine tests: hand examples plus central-difference checks."""

import math

import numpy as np
import pytest

from pimae import diffcore as dc
from pimae.errors import NonFinite, ShapeMismatch


def const(rng, *shape):
    return dc.tensor(rng.uniform(-2, 2, size=shape))


def param(rng, *shape):
    return dc.parameter(rng.uniform(-2, 2, size=shape))


# --- forward semantics ---

def test_matmul_examples():
    out = dc.matmul(dc.tensor(np.eye(2)), dc.tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert out.data.tolist() == [[1, 2], [3, 4]]
    out = dc.matmul(dc.tensor([[1.0, 2.0], [3.0, 4.0]]),
                    dc.tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert out.data.tolist() == [[19, 22], [43, 50]]
    with pytest.raises(ShapeMismatch):
        dc.matmul(dc.tensor(np.zeros((2, 3))), dc.tensor(np.zeros((2, 3))))


def test_softmax_examples():
    assert dc.softmax(dc.tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    out = dc.softmax(dc.tensor([1.0, 0.0])).data
    e = math.e
    assert abs(out[0] - e / (e + 1)) < 1e-15
    assert abs(out[1] - 1 / (e + 1)) < 1e-15
    out = dc.softmax(dc.tensor([1000.0, 0.0])).data  # must not overflow
    assert abs(out[0] - 1.0) < 1e-12 and out[1] < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = dc.tensor(rng.uniform(-1e4, 1e4, size=(6, 9)))
        s = dc.softmax(x).data.sum(axis=-1)
        assert np.abs(s - 1.0).max() < 1e-12


def test_layer_norm_examples():
    g = dc.tensor(np.ones(4))
    b = dc.tensor(np.zeros(4))
    out = dc.layer_norm(dc.tensor([3.0, 3.0, 3.0, 3.0]), g, b)
    assert np.all(out.data == 0.0)

    g2 = dc.tensor(np.ones(2))
    b2 = dc.tensor(np.zeros(2))
    out = dc.layer_norm(dc.tensor([1.0, -1.0]), g2, b2)
    want = 1.0 / math.sqrt(1.0 + 1e-5)
    assert abs(out.data[0] - want) < 1e-15
    assert abs(out.data[1] + want) < 1e-15

    beta = dc.tensor([7.0, -3.0])
    out = dc.layer_norm(dc.tensor([[0.4, 1.9]]), dc.tensor(np.zeros(2)), beta)
    assert out.data.tolist() == [[7.0, -3.0]]


def test_transpose_reshape_round_trip_exact():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 7))
    t = dc.transpose(dc.transpose(dc.tensor(x)))
    assert np.array_equal(t.data, x)
    r = dc.reshape(dc.reshape(dc.tensor(x), (35,)), (5, 7))
    assert np.array_equal(r.data, x)


def test_bilinear_sample_semantics():
    rng = np.random.default_rng(2)
    grid = dc.tensor(rng.normal(size=(3, 4, 5)))
    # exactly at a feature location
    out = dc.bilinear_sample_2d(grid, [1.0], [2.0])
    assert np.array_equal(out.data[0], grid.data[1, 2])
    # midway between two horizontal neighbours
    out = dc.bilinear_sample_2d(grid, [1.0], [2.5])
    want = 0.5 * (grid.data[1, 2] + grid.data[1, 3])
    assert np.abs(out.data[0] - want).max() < 1e-15


def test_bilinear_matches_weight_oracle():
    rng = np.random.default_rng(3)
    grid = dc.tensor(rng.normal(size=(4, 6, 3)))
    for _ in range(200):
        gy = rng.uniform(0, 3)
        gx = rng.uniform(0, 5)
        y0, x0 = int(gy), int(gx)
        y1, x1 = min(y0 + 1, 3), min(x0 + 1, 5)
        wy, wx = gy - y0, gx - x0
        want = ((1 - wy) * (1 - wx) * grid.data[y0, x0]
                + (1 - wy) * wx * grid.data[y0, x1]
                + wy * (1 - wx) * grid.data[y1, x0]
                + wy * wx * grid.data[y1, x1])
        got = dc.bilinear_sample_2d(grid, [gy], [gx]).data[0]
        assert np.abs(got - want).max() < 1e-12


def test_nonfinite_trips():
    big = dc.tensor([1e308])
    with np.errstate(over="ignore"), pytest.raises(NonFinite):
        dc.mul(big, big)
    with pytest.raises(NonFinite):
        dc.tensor([float("nan")])


# --- backward semantics ---

def test_backward_accumulates_and_doubles():
    x = dc.parameter([1.0, 2.0, 3.0])
    out = dc.mean_reduce(dc.mul(x, x))
    out.backward()
    first = x.grad.copy()
    out.backward()
    assert np.array_equal(x.grad, 2.0 * first)


def test_gather_rows_duplicate_accumulation():
    x = dc.parameter(np.arange(6.0).reshape(3, 2))
    out = dc.mean_reduce(dc.gather_rows(x, [0, 0, 2]))
    out.backward()
    # row 0 picked twice: two upstream grads of 1/6 each accumulate
    assert np.allclose(x.grad, [[2 / 6, 2 / 6], [0, 0], [1 / 6, 1 / 6]])


def test_grad_check_examples():
    rng = np.random.default_rng(4)
    a = param(rng, 3, 4)
    b = param(rng, 4, 2)
    err = dc.grad_check(lambda: dc.mean_reduce(dc.matmul(a, b)), [a, b])
    assert err < 1e-7

    x = dc.parameter([0.5])
    err = dc.grad_check(lambda: dc.mean_reduce(dc.gelu(x)), [x])
    assert err < 1e-6

    y = dc.parameter([1.5, -0.5])
    c = dc.tensor([2.0])
    err = dc.grad_check(lambda: dc.mean_reduce(dc.mul(c, c)), [y])
    assert err == 0.0  # f ignores y: analytic and numeric both exactly zero


# --- per-primitive finite-difference sweep ---

def _check(f, params):
    err = dc.grad_check(f, params)
    assert err < 1e-5, f"grad check failed: {err}"


def test_grad_matmul():
    rng = np.random.default_rng(10)
    for _ in range(10):
        n, p, q = rng.integers(1, 6, size=3)
        a, b = param(rng, n, p), param(rng, p, q)
        r = const(rng, n, q)
        _check(lambda: dc.mean_reduce(dc.mul(dc.matmul(a, b), r)), [a, b])


def test_grad_add_mul_broadcast():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n, d = rng.integers(1, 6, size=2)
        a, b = param(rng, n, d), param(rng, d)
        r = const(rng, n, d)
        _check(lambda: dc.mean_reduce(dc.mul(dc.add(a, b), r)), [a, b])
        _check(lambda: dc.mean_reduce(dc.mul(dc.mul(a, b), r)), [a, b])


def test_grad_scale_transpose_reshape():
    rng = np.random.default_rng(12)
    for _ in range(10):
        n, d = rng.integers(1, 6, size=2)
        a = param(rng, n, d)
        r = const(rng, d, n)
        _check(lambda: dc.mean_reduce(dc.mul(dc.transpose(dc.scale(a, -1.7)), r)), [a])
        r2 = const(rng, n * d)
        _check(lambda: dc.mean_reduce(dc.mul(dc.reshape(a, (n * d,)), r2)), [a])


def test_grad_concat_gather():
    rng = np.random.default_rng(13)
    for _ in range(10):
        n, m, d = rng.integers(1, 6, size=3)
        a, b = param(rng, n, d), param(rng, m, d)
        idx = rng.integers(0, n + m, size=7)
        r = const(rng, 7, d)
        _check(lambda: dc.mean_reduce(
            dc.mul(dc.gather_rows(dc.concat([a, b], axis=0), idx), r)), [a, b])


def test_grad_concat_axis1():
    rng = np.random.default_rng(14)
    for _ in range(10):
        n, d1, d2 = rng.integers(1, 5, size=3)
        a, b = param(rng, n, d1), param(rng, n, d2)
        r = const(rng, n, d1 + d2)
        _check(lambda: dc.mean_reduce(dc.mul(dc.concat([a, b], axis=1), r)), [a, b])


def test_grad_mean_reduce_axes():
    rng = np.random.default_rng(15)
    for _ in range(10):
        n, k, d = rng.integers(2, 5, size=3)
        a = param(rng, n, k, d)
        r = const(rng, n, d)
        _check(lambda: dc.mean_reduce(dc.mul(dc.mean_reduce(a, axis=1), r)), [a])
        _check(lambda: dc.mean_reduce(a), [a])


def test_grad_softmax():
    rng = np.random.default_rng(16)
    for _ in range(10):
        n, d = rng.integers(1, 6, size=2)
        a = param(rng, n, d)
        r = const(rng, n, d)
        _check(lambda: dc.mean_reduce(dc.mul(dc.softmax(a), r)), [a])


def test_grad_layer_norm():
    rng = np.random.default_rng(17)
    for _ in range(10):
        n = int(rng.integers(1, 6))
        d = int(rng.integers(2, 7))
        x, g, b = param(rng, n, d), param(rng, d), param(rng, d)
        r = const(rng, n, d)
        _check(lambda: dc.mean_reduce(dc.mul(dc.layer_norm(x, g, b), r)), [x, g, b])


def test_grad_gelu():
    rng = np.random.default_rng(18)
    for _ in range(10):
        n, d = rng.integers(1, 6, size=2)
        x = param(rng, n, d)
        r = const(rng, n, d)
        _check(lambda: dc.mean_reduce(dc.mul(dc.gelu(x), r)), [x])


def test_grad_linear():
    rng = np.random.default_rng(19)
    for _ in range(10):
        n, p, q = rng.integers(1, 6, size=3)
        x, w, b = param(rng, n, p), param(rng, p, q), param(rng, q)
        r = const(rng, n, q)
        _check(lambda: dc.mean_reduce(dc.mul(dc.linear(x, w, b), r)), [x, w, b])


def test_grad_bilinear():
    rng = np.random.default_rng(20)
    for _ in range(10):
        rows, cols, d = rng.integers(2, 6, size=3)
        grid = param(rng, rows, cols, d)
        gy = rng.uniform(0, rows - 1, size=5)
        gx = rng.uniform(0, cols - 1, size=5)
        r = const(rng, 5, d)
        _check(lambda: dc.mean_reduce(
            dc.mul(dc.bilinear_sample_2d(grid, gy, gx), r)), [grid])

"""Gradient checks for every differentiable array op.

Each op is compared against central finite differences in float64 on
randomized small instances; the finite-difference oracle never calls the
backward pass under test.
"""

import numpy as np
import pytest

from nextshot import nd
from nextshot.nd import Tensor, concat, embedding, finite_difference_grad, masked_softmax, mse, rms_norm

N_INSTANCES = 20
REL_TOL = 1e-4


def _rand(rng, shape):
    return rng.standard_normal(shape).astype(np.float64)


def _check(f, xs, atol=1e-8):
    """Compare autodiff grads of scalar f against the FD oracle."""
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    out = f(*ts)
    out.backward()
    want = finite_difference_grad(f, [x.copy() for x in xs])
    for t, w in zip(ts, want):
        got = t.grad
        denom = np.maximum(np.abs(w), np.abs(got))
        err = np.abs(got - w) / np.maximum(denom, 1e-6)
        assert np.all((err <= REL_TOL) | (np.abs(got - w) <= atol)), (
            f"max rel err {err.max():.3e}"
        )


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_add_broadcast(i):
    rng = np.random.default_rng(100 + i)
    a, b = _rand(rng, (3, 4)), _rand(rng, (4,))
    _check(lambda x, y: ((x + y) * (x + y)).sum(), [a, b])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_mul_broadcast(i):
    rng = np.random.default_rng(200 + i)
    a, b = _rand(rng, (2, 3, 4)), _rand(rng, (3, 1))
    _check(lambda x, y: (x * y).sum(), [a, b])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_sub_div(i):
    rng = np.random.default_rng(300 + i)
    a = _rand(rng, (3, 5))
    b = _rand(rng, (3, 5)) + 3.0
    _check(lambda x, y: ((x - y) / y).sum(), [a, b])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_pow_sqrt_exp(i):
    rng = np.random.default_rng(400 + i)
    a = np.abs(_rand(rng, (4, 4))) + 0.5
    _check(lambda x: ((x ** 3).sqrt() + (x * 0.1).exp()).sum(), [a])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_matmul_batched(i):
    rng = np.random.default_rng(500 + i)
    a, b = _rand(rng, (2, 3, 4)), _rand(rng, (2, 4, 5))
    _check(lambda x, y: (x @ y).sum(), [a, b])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_matmul_broadcast(i):
    rng = np.random.default_rng(600 + i)
    a, b = _rand(rng, (2, 2, 3, 4)), _rand(rng, (4, 5))
    _check(lambda x, y: ((x @ y) ** 2).sum(), [a, b])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_reshape_transpose(i):
    rng = np.random.default_rng(700 + i)
    a = _rand(rng, (2, 3, 4))
    _check(lambda x: (x.reshape(6, 4).transpose((1, 0)) ** 2).sum(), [a])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_getitem_slice(i):
    rng = np.random.default_rng(800 + i)
    a = _rand(rng, (4, 6))
    _check(lambda x: (x[1:3, ::2] * x[0:2, 1::2]).sum(), [a])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_sum_mean_axes(i):
    rng = np.random.default_rng(900 + i)
    a = _rand(rng, (3, 4, 5))
    _check(lambda x: (x.sum(axis=1) * x.mean(axis=(0, 2), keepdims=False).sum()).sum(), [a])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_silu(i):
    rng = np.random.default_rng(1000 + i)
    a = _rand(rng, (5, 5))
    _check(lambda x: x.silu().sum(), [a])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_concat(i):
    rng = np.random.default_rng(1100 + i)
    a, b = _rand(rng, (2, 3)), _rand(rng, (4, 3))
    _check(lambda x, y: (concat([x, y], axis=0) ** 2).sum(), [a, b])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_embedding(i):
    rng = np.random.default_rng(1200 + i)
    table = _rand(rng, (7, 4))
    ids = rng.integers(0, 7, size=(3, 5))
    _check(lambda t: (embedding(t, ids) ** 2).sum(), [table])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_masked_softmax(i):
    rng = np.random.default_rng(1300 + i)
    a = _rand(rng, (3, 6))
    mask = np.zeros((3, 6))
    mask[:, 4:] = -np.inf
    _check(lambda x: (masked_softmax(x, mask) * np.arange(6.0)).sum(), [a])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_softmax_unmasked(i):
    rng = np.random.default_rng(1400 + i)
    a = _rand(rng, (2, 4, 5))
    _check(lambda x: (masked_softmax(x) ** 2).sum(), [a])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_rms_norm(i):
    rng = np.random.default_rng(1500 + i)
    x = _rand(rng, (3, 8))
    gain = _rand(rng, (8,))
    _check(lambda a, g: (rms_norm(a, g) * np.arange(8.0)).sum(), [x, gain])


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_mse(i):
    rng = np.random.default_rng(1600 + i)
    a, b = _rand(rng, (4, 5)), _rand(rng, (4, 5))
    _check(lambda x, y: mse(x, y), [a, b])


def test_masked_positions_get_exact_zero_weight():
    rng = np.random.default_rng(7)
    x = Tensor(_rand(rng, (2, 5)))
    mask = np.zeros((2, 5))
    mask[:, 3:] = -np.inf
    p = masked_softmax(x, mask)
    assert np.all(p.data[:, 3:] == 0.0)
    assert np.allclose(p.data.sum(axis=-1), 1.0)


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with nd.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_backward_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1 = 5
    y.backward()
    assert np.allclose(x.grad, [5.0])

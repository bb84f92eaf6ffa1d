"""Autodiff engine: graph bookkeeping, dtype handling and gradients of basic ops."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condenseunet import tensor as T
from condenseunet.tensor import GraphError, Tensor


def test_scalar_chain_rule():
    x = Tensor(3.0, requires_grad=True)
    y = x * x * 2.0 + x
    y.backward()
    assert x.grad == pytest.approx(4 * 3.0 + 1)


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()
    loss.backward()
    with pytest.raises(GraphError, match="released"):
        loss.backward()


def test_non_scalar_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        (x * 2.0).backward()


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    h = x * 3.0
    (h * h).sum().backward()  # d/dx (3x)^2 = 18x
    np.testing.assert_allclose(x.grad, [18.0, 36.0])


def test_grad_shape_matches_data():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ((x + b) * 2.0).sum().backward()
    assert x.grad.shape == x.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_scalar_operand_keeps_float32():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    assert (2.0 * x).dtype == np.float32
    assert (1.0 - x).dtype == np.float32


def test_default_dtype_is_float64():
    assert Tensor([1, 2, 3]).dtype == np.float64


def test_debug_checks_catch_nan():
    T.set_debug_checks(True)
    try:
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            T.log(Tensor(np.array([-1.0])))
    finally:
        T.set_debug_checks(False)


def test_sqrt_gradient_zero_at_zero():
    x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    T.sqrt(x).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_index_select_repeated_indices():
    x = Tensor(np.arange(3.0).reshape(1, 3), requires_grad=True)
    T.index_select(x, np.array([0, 0, 2]), axis=1).sum().backward()
    np.testing.assert_allclose(x.grad, [[2.0, 0.0, 1.0]])


def test_concat_splits_gradient():
    a = Tensor(np.ones((1, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 1)), requires_grad=True)
    (T.concat([a, b], axis=1) * np.array([[1.0, 2.0, 3.0]])).sum().backward()
    np.testing.assert_allclose(a.grad, [[1.0, 2.0]])
    np.testing.assert_allclose(b.grad, [[3.0]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 31 - 1))
def test_unbroadcast_inverts_broadcast(shape, seed):
    rng = np.random.default_rng(seed)
    small = tuple(1 if rng.uniform() < 0.5 else n for n in shape)
    g = rng.standard_normal((2,) + tuple(shape))
    out = T.unbroadcast(g, small)
    assert out.shape == small
    np.testing.assert_allclose(out.sum(), g.sum())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sum_mean_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    (x.mean(axis=(0, 2)) * np.arange(3.0)).sum().backward()
    expected = np.broadcast_to(np.arange(3.0).reshape(1, 3, 1) / 8.0, x.shape)
    np.testing.assert_allclose(x.grad, expected)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrl.autodiff import (
    Tensor,
    concat,
    inverse_softplus,
    maximum,
    softplus,
    softplus_derivative,
)

from conftest import finite_difference_grad


def test_add_mul_grads():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([3.0, 4.0]))
    out = (a * b + a).sum()
    out.backward()
    np.testing.assert_allclose(a.grad, b.data + 1.0)
    np.testing.assert_allclose(b.grad, a.data)


def test_broadcast_grad_sums_over_expanded_axes():
    a = Tensor(np.ones((3, 2)))
    b = Tensor(np.array([10.0, 20.0]))  # broadcast over rows
    out = (a * b).sum()
    out.backward()
    np.testing.assert_allclose(b.grad, [3.0, 3.0])
    np.testing.assert_allclose(a.grad, np.tile([10.0, 20.0], (3, 1)))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(2, 4))

    def loss():
        return float(((x @ w) ** 2).sum())

    xt, wt = Tensor(x), Tensor(w)
    (xt @ wt).square().sum().backward()
    np.testing.assert_allclose(wt.grad, finite_difference_grad(loss, w), atol=1e-6)
    np.testing.assert_allclose(xt.grad, finite_difference_grad(loss, x), atol=1e-6)


def test_diamond_graph_accumulates():
    # y = x*x + x used twice; dy/dx = 2x + 1
    x = Tensor(np.array([3.0]))
    y = x * x + x
    y.backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    x.relu().sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0])


def test_max_ties_route_to_first_index():
    x = Tensor(np.array([[1.0, 3.0, 3.0]]))
    x.max(axis=1).sum().backward()
    np.testing.assert_allclose(x.grad, [[0.0, 1.0, 0.0]])


def test_maximum_ties_route_to_first_argument():
    a = Tensor(np.array([2.0, 5.0]))
    b = Tensor(np.array([2.0, 1.0]))
    maximum(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, [1.0, 1.0])
    np.testing.assert_allclose(b.grad, [0.0, 0.0])


def test_cummax_forward_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 5))
    out = Tensor(x).cummax(-1)
    np.testing.assert_array_equal(out.data, np.maximum.accumulate(x, axis=-1))


def test_cummax_grad_routes_to_first_attaining_position():
    x = Tensor(np.array([[1.0, 3.0, 2.0, 3.0]]))
    # running max: 1, 3, 3, 3 -> positions 0, 1, 1, 1
    x.cummax(-1).sum().backward()
    np.testing.assert_allclose(x.grad, [[1.0, 3.0, 0.0, 0.0]])


def test_cummax_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6))

    def loss():
        return float((np.maximum.accumulate(x, axis=-1) ** 2).sum())

    xt = Tensor(x)
    xt.cummax(-1).square().sum().backward()
    np.testing.assert_allclose(xt.grad, finite_difference_grad(loss, x), atol=1e-5)


def test_gather_is_inverse_of_permutation():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    order = np.argsort(x, axis=-1)
    xt = Tensor(x)
    g = xt.gather(order, -1)
    assert np.all(np.diff(g.data, axis=-1) >= 0)
    (g * Tensor(np.arange(5.0))).sum().backward()
    # each input position receives exactly its (permuted) weight
    expect = np.zeros_like(x)
    np.put_along_axis(expect, order, np.tile(np.arange(5.0), (3, 1)), -1)
    np.testing.assert_allclose(xt.grad, expect)


def test_getitem_slice_and_mask_grads():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    x[1:].sum().backward()
    np.testing.assert_allclose(x.grad, [[0, 0], [1, 1], [1, 1]])
    y = Tensor(np.arange(4.0))
    y[np.array([True, False, True, False])].sum().backward()
    np.testing.assert_allclose(y.grad, [1, 0, 1, 0])


def test_concat_splits_gradient():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.ones((3, 2)))
    out = concat([a, b], axis=0)
    out.backward(np.arange(10.0).reshape(5, 2))
    np.testing.assert_allclose(a.grad, [[0, 1], [2, 3]])
    np.testing.assert_allclose(b.grad, [[4, 5], [6, 7], [8, 9]])


def test_sigmoid_softplus_sqrt_grads():
    x = np.array([0.3, -1.2, 2.0])

    xt = Tensor(x)
    xt.sigmoid().sum().backward()
    s = 1 / (1 + np.exp(-x))
    np.testing.assert_allclose(xt.grad, s * (1 - s))

    xt = Tensor(x)
    xt.softplus(0.5).sum().backward()
    np.testing.assert_allclose(xt.grad, 1 / (1 + np.exp(-0.5 * x)))

    xt = Tensor(np.array([4.0, 9.0]))
    xt.sqrt().sum().backward()
    np.testing.assert_allclose(xt.grad, [0.25, 1 / 6])


# ---- softplus module functions ----


def test_softplus_reference_values():
    assert softplus(0.0, 1.0) == pytest.approx(np.log(2.0), abs=1e-12)
    assert softplus(1000.0, 1.0) == pytest.approx(1000.0, abs=1e-9)
    assert softplus_derivative(0.0, 1.0) == pytest.approx(0.5)


def test_softplus_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        softplus(1.0, 0.0)
    with pytest.raises(ValueError):
        softplus_derivative(1.0, -1.0)
    with pytest.raises(ValueError):
        inverse_softplus(0.0)


@given(st.floats(min_value=-50, max_value=50), st.floats(min_value=0.01, max_value=10))
def test_softplus_dominates_relu(x, beta):
    # strictly above relu except where the true gap exp(-beta*x)/beta
    # falls below float64 resolution
    if beta * abs(x) > 30:
        assert softplus(x, beta) >= max(x, 0.0)
    else:
        assert softplus(x, beta) > max(x, 0.0)


@given(st.floats(min_value=1e-3, max_value=1e3), st.floats(min_value=0.01, max_value=5))
def test_inverse_softplus_roundtrip(y, beta):
    assert softplus(inverse_softplus(y, beta), beta) == pytest.approx(y, rel=1e-9)


@settings(max_examples=30)
@given(st.lists(st.floats(min_value=-5, max_value=5), min_size=2, max_size=8))
def test_softplus_convex_increasing(xs):
    xs = np.sort(np.asarray(xs))
    ys = softplus(xs, 1.0)
    assert np.all(np.diff(ys) >= 0)
    grid = np.linspace(-5, 5, 101)
    second = np.diff(softplus(grid, 1.0), 2)
    assert np.all(second >= -1e-9)

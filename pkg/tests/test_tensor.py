import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from p2at import Parameter, Tensor, backward, no_grad, precision
from p2at import functional as F
from p2at.errors import DimensionError, NumericalError, UsageError
from p2at.tensor import count_flops_scope, finite_checks, get_default_dtype, is_grad_enabled

floats = st.floats(-3, 3, allow_nan=False, width=32)


def test_leaf_accumulates_across_backwards():
    p = Parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        backward((p * p).sum())
    np.testing.assert_allclose(p.grad, 2 * 2 * np.array([1.0, 2.0]))


def test_second_backward_on_same_graph_raises():
    p = Parameter(np.ones(3))
    loss = (p * 2.0).sum()
    backward(loss)
    with pytest.raises(UsageError):
        backward(loss)


def test_non_scalar_backward_raises():
    p = Parameter(np.ones(3))
    with pytest.raises(UsageError):
        backward(p * 2.0)


def test_item_requires_scalar():
    assert Tensor(np.array([4.0])).item() == 4.0
    with pytest.raises(UsageError):
        Tensor(np.ones(2)).item()


def test_backward_returns_named_gradients_with_zeros_for_unused():
    a, b = Parameter(np.ones(2), "a"), Parameter(np.ones(3), "b")
    grads = backward((a * 3.0).sum(), [("a", a), ("b", b)])
    np.testing.assert_array_equal(grads["a"], [3, 3])
    np.testing.assert_array_equal(grads["b"], np.zeros(3))


def test_shared_subexpression_gradient():
    x = Parameter(np.array([2.0]))
    y = x * x
    backward((y + y * x).sum())  # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [4 + 12])


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2))
    with no_grad():
        assert not is_grad_enabled()
        y = p * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad and y.is_leaf


def test_precision_scope_restores_default():
    assert get_default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@pytest.mark.filterwarnings("ignore:invalid value")
def test_finite_checks_raise_on_nan_unless_disabled():
    x = Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NumericalError):
        F.mul(x, 0.0)
    with finite_checks(False):
        assert np.isnan(F.mul(x, 0.0).data[1])


def test_division_by_tensor_unsupported():
    with pytest.raises(UsageError):
        Tensor([1.0]) / Tensor([2.0])


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4), elements=floats))
def test_broadcast_add_mul_gradients(a):
    with precision(np.float64):
        x = Parameter(a)
        row = Parameter(np.arange(a.shape[-1], dtype=np.float64) + 1.0)
        backward(((x + row) * row).sum())
        np.testing.assert_allclose(x.grad, np.broadcast_to(row.data, a.shape))
        expected = (a + 2 * row.data).reshape(-1, a.shape[-1]).sum(axis=0)
        np.testing.assert_allclose(row.grad, expected, rtol=1e-12, atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_matmul_gradients_match_closed_form(m, k, n, b):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    with precision(np.float64):
        a = Parameter(rng.standard_normal((b, m, k)))
        c = Parameter(rng.standard_normal((k, n)))
        g = rng.standard_normal((b, m, n))
        backward((F.matmul(a, c) * Tensor(g)).sum())
        np.testing.assert_allclose(a.grad, g @ c.data.T, atol=1e-12)
        np.testing.assert_allclose(c.grad, np.einsum("bmk,bmn->kn", a.data, g), atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        F.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 1))))


def test_matmul_flops():
    with count_flops_scope() as fc:
        F.matmul(Tensor(np.ones((5, 2, 3))), Tensor(np.ones((3, 4))))
    assert fc.total == 2 * 5 * 2 * 3 * 4


def test_reshape_transpose_take_backprop():
    with precision(np.float64):
        t = Parameter(np.arange(6.0))
        idx = np.array([[0, 5], [5, 5]])
        y = F.take(t.reshape(2, 3).transpose(1, 0).reshape(6), idx, axis=0)
        backward(y.sum())
        # transpose(1,0).reshape(6) is the permutation [0,3,1,4,2,5]
        perm = [0, 3, 1, 4, 2, 5]
        expected = np.zeros(6)
        for i in idx.ravel():
            expected[perm[i]] += 1
        np.testing.assert_array_equal(t.grad, expected)


def test_concat_splits_gradient():
    a, b = Parameter(np.ones((1, 2, 2, 2))), Parameter(np.ones((1, 3, 2, 2)))
    y = F.concat([a, b], axis=1)
    assert y.shape == (1, 5, 2, 2)
    w = np.arange(y.size, dtype=np.float32).reshape(y.shape)
    backward((y * Tensor(w)).sum())
    np.testing.assert_array_equal(a.grad, w[:, :2])
    np.testing.assert_array_equal(b.grad, w[:, 2:])


@given(hnp.arrays(np.float64, (2, 5), elements=st.floats(-50, 50)))
def test_softmax_and_log_softmax_consistent(x):
    s = F.softmax(Tensor(x, dtype=np.float64), axis=-1).data
    ls = F.log_softmax(Tensor(x, dtype=np.float64), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1, atol=1e-12)
    np.testing.assert_allclose(np.exp(ls), s, rtol=1e-10, atol=1e-300)


def test_sigmoid_is_stable_at_extremes():
    y = F.sigmoid(Tensor(np.array([-1e4, 0.0, 1e4]))).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


def test_hardswish_pieces():
    x = np.array([-4.0, -3.0, -1.5, 0.0, 2.0, 3.0, 5.0])
    with precision(np.float64):
        y = F.hardswish(Tensor(x)).data
    np.testing.assert_allclose(y, x * np.clip(x + 3, 0, 6) / 6)

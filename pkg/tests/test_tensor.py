import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from emonext.tensor import (
    ContractError,
    Tensor,
    concatenate,
    corrupt_backward,
    debug_mode,
    default_dtype,
    get_default_dtype,
    no_grad,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, dtype=np.float64)


@given(arrays(np.float64, array_shapes(max_dims=3, max_side=4), elements=finite))
def test_sum_gives_ones(a):
    x = leaf(a)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(a))


def test_square_grad():
    x = leaf([3.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_grads_accumulate_until_zeroed():
    x = leaf([1.0, 2.0])
    (x * 2.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_node_visited_once():
    x = leaf([2.0])
    y = x * x
    z = y + y  # y feeds two edges; its backward must run once with the summed grad
    z.sum().backward()
    np.testing.assert_array_equal(x.grad, [8.0])


def test_nonscalar_backward_is_contract_error():
    with pytest.raises(ContractError):
        leaf([1.0, 2.0]).backward()


def test_no_grad_builds_no_tape():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_dtype_context():
    before = get_default_dtype()
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert get_default_dtype() == before
    assert Tensor([1.0]).dtype == np.float32


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_nonfinite():
    with debug_mode():
        with pytest.raises(FloatingPointError):
            Tensor([0.0]).log()


@given(
    arrays(np.float64, (2, 3), elements=finite),
    arrays(np.float64, (3,), elements=finite),
)
def test_broadcast_add_grad_reduces(a, b):
    x, y = leaf(a), leaf(b)
    (x + y).sum().backward()
    np.testing.assert_array_equal(y.grad, np.full(3, 2.0))


def test_matmul_and_division_grads(f64):
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.5, -1.0], [2.0, 1.0]])
    x, y = leaf(a), leaf(b)
    (x @ y).sum().backward()
    np.testing.assert_allclose(x.grad, np.ones((2, 2)) @ b.T)
    np.testing.assert_allclose(y.grad, a.T @ np.ones((2, 2)))
    z = leaf([2.0])
    (1.0 / z).sum().backward()
    np.testing.assert_allclose(z.grad, [-0.25])


def test_getitem_permute_reshape_concat(f64):
    x = leaf(np.arange(6.0).reshape(2, 3))
    y = concatenate([x[:, :2].permute(1, 0).reshape(-1), x[1]], axis=0)
    (y * Tensor(np.arange(7.0))).sum().backward()
    expected = np.zeros((2, 3))
    expected[0, 0], expected[1, 0], expected[0, 1], expected[1, 1] = 0, 1, 2, 3
    expected[1] += [4, 5, 6]
    np.testing.assert_array_equal(x.grad, expected)


def test_corrupt_backward_scales_rule():
    from emonext import functional as F

    x = leaf([0.5])
    with corrupt_backward("gelu", 2.0):
        F.gelu(x).sum().backward()
    g_bad = x.grad.copy()
    x.zero_grad()
    F.gelu(x).sum().backward()
    np.testing.assert_allclose(g_bad, 2.0 * x.grad)

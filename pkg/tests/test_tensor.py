import numpy as np
import pytest

from dntdf import ops
from dntdf.gradcheck import grad_check
from dntdf.tensor import GraphError, Tensor, backward, no_grad, precision, reset_graph


def setup_function():
    reset_graph()


def test_relu_sum_gradient():
    x = Tensor(np.array([-1.0, 3.0]), requires_grad=True)
    backward(ops.sum(ops.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(ops.sum(ops.relu(x)))
    np.testing.assert_array_equal(x.grad, 0.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        backward(ops.relu(x))


def test_graph_is_consumed():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ops.sum(ops.scale(x, 2.0))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_unreachable_parameters_get_zero_grad():
    a = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    unused = ops.scale(b, 3.0)  # recorded but not part of the loss
    loss = ops.sum(ops.relu(a))
    backward(loss, params=[a, b])
    np.testing.assert_array_equal(a.grad, 1.0)
    np.testing.assert_array_equal(b.grad, 0.0)
    assert unused.shape == b.shape


def test_disjoint_param_never_recorded_gets_zero():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    backward(ops.sum(a), params=[a, b])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_gradient_accumulates_over_fanout():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    backward(ops.sum(ops.add(ops.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.scale(x, 2.0)
    assert not y.requires_grad


def test_tensors_default_to_float32_and_precision_switches():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_grad_check_linear_exact():
    w = np.arange(6.0).reshape(2, 3)
    err = grad_check(lambda x: ops.sum(ops.mul(x, Tensor(w))), np.ones((2, 3)))
    # no truncation error for a linear map; only roundoff, ~ulp(15) / 1e-6
    assert err < 1e-8


def test_grad_check_detects_wrong_gradient():
    from dntdf.tensor import Function

    class Broken(Function):
        @staticmethod
        def infer_shape(x):
            return x

        def forward(self, x):
            return x * x

        def backward(self, grad):
            return (grad,)  # should be 2x * grad

    err = grad_check(lambda x: ops.sum(Broken.apply(x)), np.full((2, 2), 3.0))
    assert err > 0.5  # |1 - 6| / 6

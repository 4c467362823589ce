import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decentflow.numeric import (
    RngStream,
    ShapeError,
    Tensor,
    gaussian,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    mean_sq,
    normal,
    parameter,
    silu,
    softmax,
    uniform,
)
from decentflow.numeric.gradcheck import elementwise_check, relative_error


def _rand(seed, shape):
    return parameter(normal(RngStream.from_label(seed, "test/input"), shape))


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_layer_norm_of_constant_is_zero():
    assert np.all(layer_norm(Tensor(np.full(5, 3.7))).data == 0.0)


def test_mean_sq_stationary_point():
    c = np.array([[0.5, -1.0], [2.0, 3.0]])
    x = parameter(c.copy())
    mean_sq(x - Tensor(c)).backward()
    assert np.all(x.grad == 0.0)


UNARY = {
    "layer_norm": layer_norm,
    "gelu": gelu,
    "silu": silu,
    "softmax": softmax,
    "log_softmax": lambda x: log_softmax(x),
    "reshape": lambda x: x.reshape(4, 3),
    "transpose": lambda x: x.transpose(1, 0),
    "slice": lambda x: x[1:, :2],
    "mean_axis": lambda x: x.mean(axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name):
    x = _rand(1, (3, 4))
    w = Tensor(normal(RngStream.from_label(2, "test/w"), UNARY[name](x).shape))
    errs = elementwise_check(lambda: (UNARY[name](x) * w).sum(), [x])
    assert errs[0] <= 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "matmul"])
def test_binary_gradients_match_finite_differences(op):
    a = _rand(3, (3, 4))
    b = _rand(4, (4, 5) if op == "matmul" else (1, 4))
    fn = {"add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "matmul": lambda: matmul(a, b)}[op]
    w = Tensor(normal(RngStream.from_label(5, "test/w"), fn().shape))
    errs = elementwise_check(lambda: (fn() * w).sum(), [a, b])
    assert max(errs) <= 1e-6


def test_batched_matmul_gradient():
    a = _rand(6, (2, 3, 4))
    b = _rand(7, (2, 4, 3))
    errs = elementwise_check(lambda: mean_sq(matmul(a, b)), [a, b])
    assert max(errs) <= 1e-6


def test_mean_sq_gradient():
    x = _rand(8, (3, 4))
    assert elementwise_check(lambda: mean_sq(x), [x])[0] <= 1e-6


@given(st.integers(1, 4), st.integers(3, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_layer_norm_gelu_chain_gradient(rows, cols, seed):
    x = _rand(seed, (rows, cols))
    w = Tensor(normal(RngStream.from_label(seed, "w"), (rows, cols)))
    errs = elementwise_check(lambda: (gelu(layer_norm(x)) * w).sum(), [x])
    assert errs[0] <= 1e-6


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(3, 4\).*\(3, 4\)"):
        matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))))
    with pytest.raises(ShapeError, match=r"add.*\(3, 4\).*\(2,\)"):
        Tensor(np.zeros((3, 4))) + Tensor(np.zeros(2))


def test_gaussian_reproducible():
    a = gaussian(RngStream(7, 11, 5), (4, 3)).data
    b = gaussian(RngStream(7, 11, 5), (4, 3)).data
    assert np.array_equal(a, b)
    s = RngStream(7, 11, 0)
    gaussian(s, 10)
    assert s.counter == 20


def test_gaussian_counter_addresses_positions():
    s = RngStream(3, 4)
    first = normal(s, 6)
    rest = normal(RngStream(3, 4, counter=6), 3)
    assert np.array_equal(first[3:], rest)


def test_gaussian_mean_and_variance():
    x = normal(RngStream.from_label(0, "lln"), 10**6)
    assert abs(x.mean()) <= 0.01
    assert abs(x.var() - 1.0) <= 0.01


def test_distinct_streams_uncorrelated():
    a = normal(RngStream.from_label(0, "expert/0/noise"), 10**5)
    b = normal(RngStream.from_label(0, "expert/1/noise"), 10**5)
    assert abs(np.corrcoef(a, b)[0, 1]) <= 0.01


def test_uniform_range():
    u = uniform(RngStream(1, 2), 10**5)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005


def test_relative_error_zero_case():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

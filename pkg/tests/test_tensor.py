import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from superseg import tensor as T
from superseg.gradcheck import check


def test_tensor_from_shapes():
    t = T.tensor_from([1, 2, 3, 4], [2, 2])
    assert t.shape == (2, 2)
    assert t.data.tolist() == [[1, 2], [3, 4]]
    assert not t.requires_grad and t.grad is None
    assert T.tensor_from([], [0]).size == 0
    assert T.tensor_from([5], [1, 1, 1, 1]).shape == (1, 1, 1, 1)


def test_tensor_from_length_mismatch():
    with pytest.raises(ValueError):
        T.tensor_from([1, 2, 3], [2, 2])


def test_rank_above_four_rejected():
    with pytest.raises(ValueError):
        T.Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_default_dtype_is_float64():
    assert T.tensor_from([1], [1]).data.dtype == np.float64


def test_elementwise_examples():
    a = T.tensor_from([1, 2], [2])
    b = T.tensor_from([3, 4], [2])
    assert T.elementwise("add", a, b).data.tolist() == [4, 6]
    assert T.elementwise("log", T.tensor_from([1.0], [1])).data.tolist() == [0.0]
    # log clamps at 1e-12 before evaluating
    got = T.log(T.tensor_from([1e-300], [1])).item()
    assert got == pytest.approx(math.log(1e-12))
    assert got == pytest.approx(-27.631021115928547, abs=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.add(T.Tensor(np.zeros(2)), T.Tensor(np.zeros(3)))


def test_reduce_examples():
    assert T.reduce("sum", T.tensor_from([1, 2, 3], [3])).item() == 6
    assert T.reduce("mean", T.tensor_from([1, 3, 5, 7], [2, 2])).item() == 4
    assert T.reduce("sum", T.tensor_from([1, 2, 3, 4], [2, 2]), axes=0).data.tolist() == [4, 6]
    with pytest.raises(ValueError):
        T.reduce("sum", T.tensor_from([1, 2], [2]), axes=3)


def test_backward_sum_of_squares():
    theta = T.parameter([1.0, 2.0])
    with T.Tape() as tape:
        j = T.sum(T.mul(theta, theta))
    tape.backward(j)
    assert theta.grad.tolist() == [2.0, 4.0]


def test_backward_mean():
    theta = T.parameter(np.arange(4.0))
    with T.Tape() as tape:
        j = T.mean(theta)
    tape.backward(j)
    assert theta.grad.tolist() == [0.25] * 4


def test_backward_rejects_non_scalar_and_detached():
    theta = T.parameter([1.0, 2.0])
    with T.Tape() as tape:
        out = T.scale(theta, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)
    with pytest.raises(ValueError, match="not recorded"):
        tape.backward(T.Tensor(1.0))
    other = T.Tape()
    with T.Tape() as tape2:
        j = T.sum(theta)
    with pytest.raises(ValueError):
        other.backward(j)
    tape2.backward(j)


def test_nothing_recorded_outside_tape():
    theta = T.parameter([1.0])
    out = T.sum(T.mul(theta, theta))
    assert not out.requires_grad


def test_backward_accumulates_until_zeroed():
    theta = T.parameter([3.0])
    for expected in (6.0, 12.0):
        with T.Tape() as tape:
            j = T.sum(T.square(theta))
        tape.backward(j)
        assert theta.grad.tolist() == [expected]
    theta.zero_grad()
    with T.Tape() as tape:
        j = T.sum(T.square(theta))
    tape.backward(j)
    assert theta.grad.tolist() == [6.0]


def test_backward_in_exact_reverse_order():
    theta = T.parameter([2.0])
    with T.Tape() as tape:
        a = T.mul(theta, theta)
        b = T.mul(a, theta)
        j = T.sum(b)
    ops = [n.op for n in tape.nodes]
    assert ops == ["mul", "mul", "sum"]
    tape.backward(j)
    assert theta.grad.tolist() == [12.0]


def _grad(fn, value):
    theta = T.parameter(value)
    with T.Tape() as tape:
        j = fn(theta)
    tape.backward(j)
    return theta.grad


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-3, 3)))
def test_linearity_of_backward(x):
    f = lambda t: T.sum(T.square(t))  # noqa: E731
    g = lambda t: T.sum(T.mul(T.exp(t), t))  # noqa: E731
    both = _grad(lambda t: T.add(f(t), g(t)), x)
    np.testing.assert_allclose(both, _grad(f, x) + _grad(g, x), rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(0.1, 3)))
def test_zero_and_rerun_is_deterministic(x):
    theta = T.parameter(x)

    def run():
        theta.zero_grad()
        with T.Tape() as tape:
            j = T.sum(T.log(T.mul(theta, theta)))
        tape.backward(j)
        return theta.grad.copy()

    assert np.array_equal(run(), run())


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(0.5, 2.0)),
    arrays(np.float64, (3, 4), elements=st.floats(0.5, 2.0)),
)
def test_core_ops_match_finite_differences(a, b):
    w = np.linspace(-1, 1, 12).reshape(3, 4)

    def proj(t):
        return T.sum(T.mul(t, T.Tensor(w)))

    for fn, args in [
        (lambda p, q: proj(T.mul(p, q)), [a, b]),
        (lambda p, q: proj(T.div(p, q)), [a, b]),
        (lambda p: proj(T.log(p)), [a]),
        (lambda p: proj(T.square(T.sub(p, 1.0))), [a]),
        (lambda p: T.sum(T.mean(p, axes=0)), [a]),
    ]:
        assert check(fn, args) < 1e-4


def test_float32_option():
    T.set_default_dtype(np.float32)
    try:
        assert T.tensor_from([1.0], [1]).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)

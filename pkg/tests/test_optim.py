import numpy as np
import pytest

from superseg import tensor as T
from superseg.optim import Adam, adam_step


def _param_with_grad(value, grad):
    p = T.parameter(np.array(value, dtype=float), "w")
    p.grad = np.array(grad, dtype=float)
    return p


def test_zero_gradient_leaves_params():
    p = _param_with_grad([1.0, -2.0], [0.0, 0.0])
    opt = Adam([p])
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]
    assert opt.t == 1


def test_first_step_closed_form():
    p = _param_with_grad([0.0], [1.0])
    Adam([p], lr=0.01).step()
    assert p.data[0] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-15)


def test_two_constant_steps():
    p = _param_with_grad([0.0, 3.0], [1.0, 1.0])
    opt = Adam([p], lr=0.01)
    adam_step(opt)
    adam_step(opt)
    np.testing.assert_allclose(p.data - [0.0, 3.0], -0.02, atol=1e-6)


def test_missing_gradient_names_parameter():
    p = T.parameter(np.zeros(2), "enc0.conv0.w")
    with pytest.raises(ValueError, match="enc0.conv0.w"):
        Adam([p]).step()


def test_step_bounded_and_deterministic():
    rng = np.random.default_rng(0)
    grads = [rng.normal(scale=10 ** rng.uniform(-6, 6), size=5) for _ in range(20)]

    def run():
        p = T.parameter(np.zeros(5))
        opt = Adam([p], lr=0.01)
        deltas = []
        for g in grads:
            before = p.data.copy()
            p.grad = g
            opt.step()
            deltas.append(p.data - before)
        return np.array(deltas)

    a, b = run(), run()
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= 0.01 / (1 - 0.9) + 1e-12


def test_zero_grad_clears():
    p = _param_with_grad([1.0], [1.0])
    opt = Adam([p])
    opt.zero_grad()
    assert p.grad is None

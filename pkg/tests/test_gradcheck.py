import numpy as np
import pytest

from userkws import tensor as T
from userkws.gradcheck import NonFiniteError, gradient_check, numeric_derivative
from userkws.tensor import Parameter

import gradcases


def test_linear_layer_fp64_below_1e6(rng):
    fn, leaves, wrt, pin = gradcases.linear(rng)
    assert gradient_check(fn, leaves, wrt, probes=100, analytic_dtype=np.float64, pin_masks=pin) < 1e-6


def test_detects_a_wrong_gradient(rng):
    x = Parameter(rng.standard_normal(5), dtype=np.float64)

    def broken():
        out = T.Tensor._result(x.data ** 2, (x,), lambda g: x._accumulate(g * x.data))  # should be 2x
        return T.weighted_sum(out, np.ones(5))

    assert gradient_check(broken, [x], probes=5, analytic_dtype=np.float64) > 0.3


def test_frozen_parameter_compares_as_zero(rng):
    fn, leaves, _, _ = gradcases.linear(rng)
    x, w, b = leaves
    w.trainable = False
    fn().backward()
    assert w.grad is None
    assert x.grad is not None and b.grad is not None


def test_non_finite_raises():
    x = Parameter(np.array([np.inf, 1.0]), dtype=np.float64)
    with pytest.raises(NonFiniteError):
        gradient_check(lambda: T.weighted_sum(x, [1.0, 1.0]), [x], probes=2)


def test_restores_leaf_data_and_dtype(rng):
    fn, leaves, wrt, pin = gradcases.conv2d(rng)
    for t in leaves:
        t.data = t.data.astype(np.float32)
    before = [t.data.copy() for t in leaves]
    gradient_check(fn, leaves, wrt, probes=10)
    for t, b in zip(leaves, before):
        assert t.data.dtype == np.float32
        np.testing.assert_array_equal(t.data, b)


def test_numeric_derivative_shrinks_step_across_kink():
    # |x| near 0.0004: a 1e-3 step straddles the kink, a smaller one does not
    x = Parameter(np.array([4e-4]), dtype=np.float64)
    fn = lambda: T.weighted_sum(T.add(T.relu(x), T.relu(T.mul(x, Parameter(np.array([-1.0]), dtype=np.float64)))),
                                [1.0])
    assert abs(numeric_derivative(fn, x, (0,)) - 1.0) < 1e-9


def test_pinned_masks_reproduce_the_analytic_piece():
    # at x = 4e-4 the 1e-3 step crosses relu's kink; pinning keeps the active side
    x = Parameter(np.array([4e-4]), dtype=np.float64)
    fn = lambda: T.weighted_sum(T.relu(x), [1.0])
    assert gradient_check(fn, [x], probes=1, analytic_dtype=np.float64, pin_masks=True) < 1e-9

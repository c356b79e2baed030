"""Derivative engine: propagated derivatives vs independent oracles."""

import numpy as np
import pytest

from convexot.densities import StandardGaussian
from convexot.derivatives import (
    Bundle,
    DiffEngineError,
    LossFunctional,
    QuadraticPotential,
    ScalarField,
    eval_with_derivatives,
    finite_diff_check,
    max_relative_error,
    param_gradient,
)
from convexot.icnn import ICNN, init_icnn
from convexot.training import MapTargetLoss, MongeAmpereResidual, PullbackNLL


class LinearField(ScalarField):
    """u(x) = w . x, one weight per coordinate."""

    def __init__(self, dim, w):
        self.dim = dim
        self.n_params = dim
        self.theta = np.asarray(w, dtype=float).ravel()

    def derivatives(self, theta, X, order=2):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        w = np.asarray(theta, dtype=float)
        hess = np.zeros((X.shape[0], self.dim, self.dim)) if order == 2 else None
        return Bundle(X @ w, np.broadcast_to(w, X.shape).copy(), hess)

    def derivatives_with_tape(self, theta, X, order=2):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.derivatives(theta, X, order), X

    def param_backward(self, tape, vbar, gbar, hbar=None):
        X = tape
        return X.T @ np.asarray(vbar) + np.asarray(gbar).sum(axis=0)


def test_linear_field_derivatives():
    f = LinearField(1, [2.0])
    b = eval_with_derivatives(f, f.theta, np.array([3.0]))
    assert b.value[0] == 6.0
    assert b.grad[0, 0] == 2.0
    assert b.hess[0, 0, 0] == 0.0


def test_single_softplus_unit_matches_analytic_values():
    # one hidden unit, read-out weight 1: u(x) = softplus(x) at alpha=1
    m = ICNN(1, (1,), alpha=1.0)
    views = m.unpack(m.theta)
    views["Wx0"][:] = 1.0
    views["wz"][:] = 1.0
    b = m.bundle(np.zeros((1, 1)), order=2)
    assert b.value[0] == pytest.approx(np.log(2.0), abs=1e-12)
    assert b.grad[0, 0] == pytest.approx(0.5, abs=1e-12)
    assert b.hess[0, 0, 0] == pytest.approx(0.25, abs=1e-12)


def test_hessian_is_bitwise_symmetric():
    m = init_icnn(4, (11, 7), seed=5, scale=0.7)
    X = np.random.default_rng(0).standard_normal((13, 4))
    H = m.bundle(X, order=2).hess
    assert np.array_equal(H, H.transpose(0, 2, 1))


def test_evaluation_is_bitwise_deterministic():
    m = init_icnn(3, (9, 9), seed=2)
    X = np.random.default_rng(1).standard_normal((7, 3))
    b1 = m.bundle(X, order=2)
    b2 = m.bundle(X, order=2)
    assert np.array_equal(b1.value, b2.value)
    assert np.array_equal(b1.grad, b2.grad)
    assert np.array_equal(b1.hess, b2.hess)


class GradShiftLoss(LossFunctional):
    """L = mean (du/dx - 1)^2 in one dimension."""

    order = 1

    def per_sample(self, bundle, X):
        return (bundle.grad[:, 0] - 1.0) ** 2

    def adjoints(self, bundle, X):
        gbar = np.zeros_like(bundle.grad)
        gbar[:, 0] = 2.0 * (bundle.grad[:, 0] - 1.0) / bundle.n
        return np.zeros(bundle.n), gbar, None


class LogCurvatureLoss(LossFunctional):
    """L = mean log det d2u/dx2: the likelihood-loss curvature pattern."""

    order = 2

    def per_sample(self, bundle, X):
        return np.log(np.linalg.det(bundle.hess))

    def adjoints(self, bundle, X):
        hbar = np.linalg.inv(bundle.hess) / bundle.n
        return np.zeros(bundle.n), np.zeros_like(bundle.grad), hbar


def test_param_gradient_linear_weight():
    # u = w x, L = (u' - 1)^2: dL/dw = 2 (w - 1) = 2 at w = 2
    f = LinearField(1, [2.0])
    value, grad = param_gradient(GradShiftLoss(), f, f.theta, np.array([[0.3]]))
    assert grad[0] == pytest.approx(2.0, abs=1e-12)


def test_param_gradient_log_curvature():
    # u = w x^2 / 2, L = log det d2u = log w: dL/dw = 1/w = 0.5 at w = 2
    f = QuadraticPotential(1, w=2.0)
    value, grad = param_gradient(LogCurvatureLoss(), f, f.theta, np.array([[0.7]]))
    assert value == pytest.approx(np.log(2.0), abs=1e-12)
    assert grad[0] == pytest.approx(0.5, abs=1e-12)


class ConstantLoss(LossFunctional):
    order = 1

    def per_sample(self, bundle, X):
        return np.full(bundle.n, 3.5)

    def adjoints(self, bundle, X):
        return np.zeros(bundle.n), np.zeros_like(bundle.grad), None


def test_param_gradient_of_constant_loss_is_zero():
    m = init_icnn(2, (6, 4), seed=7)
    _, grad = param_gradient(
        ConstantLoss(), m, m.theta, np.random.default_rng(3).standard_normal((5, 2))
    )
    assert np.all(grad == 0.0)


def test_finite_diff_check_on_linear_field_is_noise_level():
    # zero Hessian: any discrepancy is stencil roundoff, reported below the
    # acceptance tolerances by a wide margin
    f = LinearField(3, [1.0, -2.0, 0.5])
    rep = finite_diff_check(f, f.theta, np.array([0.2, -0.1, 0.4]), h=1e-4)
    assert rep.grad_error < 1e-10
    assert rep.hess_error == 0.0


def test_finite_diff_check_random_small_net():
    rng = np.random.default_rng(42)
    m = init_icnn(3, (8, 8), seed=10, scale=0.6)
    rep = finite_diff_check(m, m.theta, rng.standard_normal(3), h=1e-4)
    assert rep.grad_error < 1e-4
    assert rep.hess_error < 1e-3


def test_finite_diff_check_rejects_zero_step():
    m = init_icnn(2, (4,), seed=0)
    with pytest.raises(ValueError):
        finite_diff_check(m, m.theta, np.zeros(2), h=0.0)


def test_param_gradients_of_all_three_losses_match_fd():
    rng = np.random.default_rng(8)
    m = init_icnn(2, (7, 6), seed=3, scale=0.5)
    batch = rng.standard_normal((6, 2))
    losses = [
        MongeAmpereResidual(StandardGaussian(2), StandardGaussian(2)),
        PullbackNLL(StandardGaussian(2)),
        MapTargetLoss(batch),
    ]
    for loss in losses:
        rep = finite_diff_check(m, m.theta, batch[0], h=1e-4, loss=loss, batch=batch)
        assert rep.param_error < 1e-4, type(loss).__name__


def test_gradient_and_hessian_property_sweep():
    # smaller sibling of the acceptance sweep, for fast regressions
    rng = np.random.default_rng(2024)
    for trial in range(20):
        d = int(rng.integers(1, 6))
        widths = tuple(int(w) for w in rng.integers(2, 17, size=rng.integers(1, 4)))
        m = init_icnn(d, widths, seed=int(rng.integers(1 << 31)), scale=0.6)
        x = rng.standard_normal(d)
        rep = finite_diff_check(m, m.theta, x, h=1e-4)
        assert rep.grad_error < 1e-4, (trial, d, widths)
        assert rep.hess_error < 1e-3, (trial, d, widths)


def test_non_finite_loss_reports_sample_index():
    class ExplodingLoss(LossFunctional):
        order = 1

        def per_sample(self, bundle, X):
            out = np.zeros(bundle.n)
            out[2] = np.nan
            return out

        def adjoints(self, bundle, X):
            return np.zeros(bundle.n), np.zeros_like(bundle.grad), None

    m = init_icnn(2, (4,), seed=1)
    with pytest.raises(DiffEngineError) as err:
        param_gradient(ExplodingLoss(), m, m.theta, np.zeros((4, 2)))
    assert err.value.sample == 2


def test_non_finite_forward_names_the_layer():
    m = init_icnn(1, (3, 3), seed=4)
    m.theta[0] = np.inf
    with pytest.raises(DiffEngineError) as err:
        eval_with_derivatives(m, m.theta, np.ones((2, 1)))
    assert err.value.layer == 0


def test_empty_batch_is_rejected():
    m = init_icnn(2, (4,), seed=1)
    with pytest.raises(ValueError):
        param_gradient(MapTargetLoss(np.zeros((0, 2))), m, m.theta, np.zeros((0, 2)))


def test_max_relative_error_scales_by_largest_entry():
    assert max_relative_error([0.0, 2.0], [0.0, 2.0]) == 0.0
    assert max_relative_error([0.0, 2.0], [0.0002, 2.0]) == pytest.approx(1e-4)

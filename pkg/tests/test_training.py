"""Losses against analytic values; the optimization loop end to end."""

import dataclasses
import math

import numpy as np
import pytest

from convexot.densities import (
    Annulus,
    Gaussian,
    GaussianMixture,
    StandardGaussian,
    annulus_reference,
    gaussian_ot_map,
)
from convexot.derivatives import (
    AffinePotential,
    QuadraticPotential,
    RadialQuarticPotential,
)
from convexot.icnn import init_icnn
from convexot.numerics import NonPDHessianError
from convexot.training import (
    TrainConfig,
    TrainingDiverged,
    inverse_loss,
    monge_ampere_residual_loss,
    nll_loss,
    pretrain_identity,
    train,
    w2_estimate,
)

LOG_2PI = math.log(2 * math.pi)


# -- residual loss ---------------------------------------------------------------


def test_residual_vanishes_for_identity_on_matched_gaussians():
    qp = QuadraticPotential(2, w=1.0)
    sg = StandardGaussian(2)
    X = np.random.default_rng(0).standard_normal((2000, 2))
    assert monge_ampere_residual_loss(qp, sg, sg, X) <= 1e-12


def test_residual_single_point_between_shifted_gaussians():
    # residual at x=0 with the identity potential: (phi(2) - phi(0))^2
    f, g = Gaussian([0.0], [[1.0]]), Gaussian([2.0], [[1.0]])
    val = monge_ampere_residual_loss(QuadraticPotential(1), f, g, np.zeros((1, 1)))
    phi = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    assert val == pytest.approx((phi(2.0) - phi(0.0)) ** 2, rel=1e-10)
    assert val == pytest.approx(0.118991, abs=1e-6)


def test_residual_vanishes_for_radial_quartic_on_annulus():
    ref = annulus_reference(2)
    X = ref.source.sample(5000, seed=7)
    val = monge_ampere_residual_loss(
        RadialQuarticPotential(2), ref.source, ref.target, X
    )
    assert val <= 1e-6


def test_residual_vanishes_for_affine_potential_on_gaussian_pair():
    g1, g2 = Gaussian([0.5], [[2.0]]), Gaussian([-1.0], [[0.5]])
    ref = gaussian_ot_map(g1, g2)
    X = g1.sample(5000, seed=3)
    val = monge_ampere_residual_loss(ref.true_potential, g1, g2, X)
    assert val <= 1e-12


def test_residual_positive_off_solution():
    f, g = Gaussian([0.0], [[1.0]]), Gaussian([2.0], [[1.0]])
    X = f.sample(500, seed=1)
    assert monge_ampere_residual_loss(QuadraticPotential(1), f, g, X) > 1e-3


def test_residual_empty_batch_rejected():
    sg = StandardGaussian(1)
    with pytest.raises(ValueError):
        monge_ampere_residual_loss(QuadraticPotential(1), sg, sg, np.zeros((0, 1)))


# -- likelihood loss ---------------------------------------------------------------


def test_nll_identity_map_equals_gaussian_cross_entropy():
    X = np.random.default_rng(4).standard_normal((100_000, 1))
    val = nll_loss(QuadraticPotential(1, w=1.0), X, StandardGaussian(1))
    # the value is exactly the empirical mean of -log phi(x)
    exact = 0.5 * LOG_2PI + 0.5 * float(np.mean(X**2))
    assert val == pytest.approx(exact, abs=1e-12)
    assert val == pytest.approx(0.5 * LOG_2PI + 0.5, abs=0.01)


def test_nll_scaling_map_has_closed_form():
    X = np.random.default_rng(4).standard_normal((100_000, 1))
    val = nll_loss(QuadraticPotential(1, w=2.0), X, StandardGaussian(1))
    exact = 0.5 * LOG_2PI + 2.0 * float(np.mean(X**2)) - math.log(2.0)
    assert val == pytest.approx(exact, abs=1e-12)
    assert val == pytest.approx(0.5 * LOG_2PI + 2.0 - math.log(2.0), abs=0.01)


def test_nll_rejects_flat_potential_with_sample_info():
    X = np.zeros((4, 2))
    with pytest.raises(NonPDHessianError) as err:
        nll_loss(QuadraticPotential(2, w=0.0), X, StandardGaussian(2))
    assert err.value.sample_index == 0


def test_true_potential_minimizes_nll_among_perturbations():
    g1, g2 = Gaussian([0.4, -0.2], [[1.4, 0.3], [0.3, 0.8]]), Gaussian(
        [1.0, 0.5], [[0.9, -0.2], [-0.2, 1.1]]
    )
    ref = gaussian_ot_map(g1, g2)
    X = g1.sample(100_000, seed=11)
    base = nll_loss(ref.true_potential, X, g2)
    rng = np.random.default_rng(5)
    for _ in range(10):
        S, b = ref.true_potential._unpack(ref.true_potential.theta)
        dS = 0.05 * rng.standard_normal((2, 2))
        pert = AffinePotential(S + dS @ dS.T + 0.05 * rng.standard_normal() * np.eye(2), b + 0.1 * rng.standard_normal(2))
        # 3 MC standard errors of slack on the comparison
        assert nll_loss(pert, X, g2) >= base - 3e-2 / math.sqrt(X.shape[0] / 2)


# -- inverse loss -----------------------------------------------------------------


def test_inverse_loss_identity_pair_is_zero():
    u = QuadraticPotential(2, w=1.0)
    X = np.random.default_rng(0).standard_normal((100, 2))
    assert inverse_loss(u, u, X) == 0.0


def test_inverse_loss_exact_conjugate_is_zero():
    # grad u = 2x, grad v = y / 2 inverts it exactly
    u = QuadraticPotential(2, w=2.0)
    v = QuadraticPotential(2, w=0.5)
    X = np.random.default_rng(1).standard_normal((100, 2))
    assert inverse_loss(v, u, X) <= 1e-28


def test_inverse_loss_mismatch_equals_dimension():
    u = QuadraticPotential(2, w=2.0)
    v = QuadraticPotential(2, w=1.0)
    X = np.random.default_rng(2).standard_normal((200_000, 2))
    assert inverse_loss(v, u, X) == pytest.approx(2.0, abs=0.03)


# -- distance estimate -------------------------------------------------------------


def test_w2_estimate_identity_is_zero():
    w2sq, w2 = w2_estimate(QuadraticPotential(3, w=1.0), StandardGaussian(3), 10_000, 1)
    assert w2sq == 0.0 and w2 == 0.0


def test_w2_estimate_constant_shift():
    shift = AffinePotential(np.eye(1), np.array([2.0]))
    w2sq, w2 = w2_estimate(shift, StandardGaussian(1), 1_000_000, 2)
    assert w2sq == pytest.approx(4.0, rel=1e-12)
    assert w2 == pytest.approx(2.0, rel=1e-12)


def test_w2_estimate_against_closed_form_for_scaling():
    # grad u = 2x over N(0,1): E|x - 2x|^2 = E|x|^2 = 1
    w2sq, w2 = w2_estimate(QuadraticPotential(1, w=2.0), StandardGaussian(1), 1_000_000, 3)
    assert w2sq == pytest.approx(1.0, rel=0.01)


# -- pretraining --------------------------------------------------------------------


def test_pretraining_reaches_identity():
    m = init_icnn(2, (32, 32), seed=1, scale=0.5)
    rng = np.random.default_rng(10)
    res = pretrain_identity(m, 2500, 2e-3, 3e-3, 256, rng)
    assert res.reached
    # held-out re-evaluation stays within twice the tolerance
    X = np.random.default_rng(99).standard_normal((4000, 2))
    held = float(np.mean(np.sum((m.transport_map(X) - X) ** 2, axis=1)))
    assert held <= 2 * 2e-3
    # the potential itself behaves like |x|^2/2 + const where it was fit
    Y = np.random.default_rng(98).standard_normal((4000, 2))
    Y = Y[np.linalg.norm(Y, axis=1) <= 2.0]
    dev = m.potential(Y) - m.potential(np.zeros((1, 2)))[0] - 0.5 * np.sum(Y**2, axis=1)
    assert float(np.abs(dev).mean()) <= 0.05


def test_pretraining_zero_iterations_keeps_parameters():
    m = init_icnn(2, (8,), seed=3)
    before = m.theta.copy()
    res = pretrain_identity(m, 0, 1e-3, 1e-3, 64, np.random.default_rng(0))
    assert np.array_equal(before, m.theta)
    assert not res.reached


# -- full training runs ---------------------------------------------------------------


def _short_cfg(**kw):
    base = dict(
        seed=5,
        iterations=2000,
        batch_size=256,
        widths=(32, 32),
        pretrain_iterations=1500,
        inverse_iterations=2000,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_residual_training_learns_translation():
    f, g = Gaussian([0.0], [[1.0]]), Gaussian([2.0], [[1.0]])
    ref = gaussian_ot_map(f, g)
    pair = train(_short_cfg(iterations=3000), source=f, target=g)
    X = f.sample(20_000, seed=42)
    uvp = 100.0 * float(
        np.mean(np.sum((pair.u.transport_map(X) - ref.true_map(X)) ** 2, axis=1))
    ) / g.total_variance()
    assert uvp <= 0.5
    w2sq, w2 = w2_estimate(pair.u, f, 100_000, seed=43)
    assert w2 == pytest.approx(2.0, rel=0.05)


def test_training_is_bitwise_deterministic():
    cfg = _short_cfg(iterations=120, pretrain_iterations=100, inverse_iterations=80)
    sg = StandardGaussian(2)
    a = train(cfg, source=sg, target=sg)
    b = train(cfg, source=sg, target=sg)
    assert np.array_equal(a.u.theta, b.u.theta)
    assert np.array_equal(a.v.theta, b.v.theta)
    la = [loss for _, loss, _ in a.history["main"]]
    lb = [loss for _, loss, _ in b.history["main"]]
    assert la == lb


def test_training_divergence_carries_history():
    # an absurd step size overflows the forward pass within a few steps
    f, g = Gaussian([0.0], [[1.0]]), Gaussian([2.0], [[1.0]])
    cfg = _short_cfg(
        learning_rate=1e150, iterations=400, pretrain_iterations=0,
        lr_schedule="constant",
    )
    with pytest.raises(TrainingDiverged) as err:
        train(cfg, source=f, target=g)
    assert isinstance(err.value.history, dict)


def test_likelihood_training_fits_a_mixture():
    mix = GaussianMixture(
        [0.5, 0.5],
        [Gaussian([1.2, 0.0], 0.35 * np.eye(2)), Gaussian([-1.2, 0.0], 0.35 * np.eye(2))],
    )
    data = mix.sample(6000, seed=21)
    cfg = _short_cfg(
        loss="likelihood",
        iterations=3000,
        quad=1e-6,
        holdout=1000,
        inverse_iterations=1500,
    )
    pair = train(cfg, samples=data, background=StandardGaussian(2))
    held = pair.holdout_samples
    model_nll = nll_loss(pair.u, held, StandardGaussian(2))
    true_nll = -float(mix.log_density(held).mean())
    assert model_nll - true_nll <= 0.25  # short-budget smoke bound
    assert pair.inverse_mse <= 0.05


def test_train_validates_mode_arguments():
    sg = StandardGaussian(2)
    with pytest.raises(ValueError):
        train(_short_cfg(), source=sg)  # no target
    with pytest.raises(ValueError):
        train(_short_cfg(loss="likelihood"), samples=np.zeros((10, 2)))  # no background
    with pytest.raises(ValueError):
        train(
            _short_cfg(loss="likelihood"),
            samples=np.zeros((10, 3)),
            background=StandardGaussian(2),
        )


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1).validate()
    with pytest.raises(ValueError):
        TrainConfig(loss="else").validate()
    cfg = TrainConfig().resolved(2)
    assert cfg.pretrain_tolerance == pytest.approx(2e-3)
    assert cfg.inverse_iterations == cfg.iterations

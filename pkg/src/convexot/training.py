"""Losses and the optimization loop for the transport potential.

Two main losses train the forward potential u: the Monge-Ampere residual
(det D2u(x) g(grad u(x)) - f(x) squared over collocation points) when both
densities are evaluable, and the pullback negative log-likelihood
-(log det D2u(x_i) + log g(grad u(x_i))) when the source is known through
samples only.  A second potential v is fitted to invert the learned map by
regressing grad v(grad u(x)) onto x.  Optimization is plain Adam with
post-step clamping of the convexity constraints; everything is driven by
one seed, so runs are bitwise reproducible in single-threaded mode.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .derivatives import DiffEngineError, LossFunctional, param_gradient
from .icnn import ICNN, init_icnn
from .numerics import chol_logdet, det_and_adjugate

__all__ = [
    "TrainConfig",
    "TrainedPair",
    "TrainingDiverged",
    "Adam",
    "MongeAmpereResidual",
    "PullbackNLL",
    "MapTargetLoss",
    "monge_ampere_residual_loss",
    "nll_loss",
    "inverse_loss",
    "w2_estimate",
    "pretrain_identity",
    "train",
]

log = logging.getLogger("convexot")


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; carries the history so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or {}


# ---------------------------------------------------------------------------
# Loss functionals
# ---------------------------------------------------------------------------


class MongeAmpereResidual(LossFunctional):
    """Mean squared pointwise residual det(D2u(x)) g(grad u(x)) - f(x).

    The determinant is signed (no clamping), so collapsing Hessian
    directions produce a large residual that pushes the iterate back into
    the convex regime.  Requires log-density and score of the target and
    log-density of the source.
    """

    order = 2

    def __init__(self, source, target):
        self.source = source
        self.target = target
        self._cache = (None, None)

    def _pieces(self, bundle, X):
        key = (id(bundle), id(X))
        if self._cache[0] == key:
            return self._cache[1]
        det, adj = det_and_adjugate(bundle.hess)
        gval = np.exp(self.target.log_density(bundle.grad))
        fval = np.exp(self.source.log_density(X))
        r = det * gval - fval
        pieces = (r, det, adj, gval)
        self._cache = (key, pieces)
        return pieces

    def per_sample(self, bundle, X):
        r, _, _, _ = self._pieces(bundle, X)
        return r * r

    def adjoints(self, bundle, X):
        r, det, adj, gval = self._pieces(bundle, X)
        n = bundle.n
        coef = 2.0 * r / n
        hbar = (coef * gval)[:, None, None] * adj
        score = self.target.grad_log_density(bundle.grad)
        gbar = np.where(
            gval[:, None] > 0.0, (coef * det * gval)[:, None] * score, 0.0
        )
        return np.zeros(n), gbar, hbar


class PullbackNLL(LossFunctional):
    """Negative mean of log det D2u(x_i) + log g(grad u(x_i)).

    Minimizing it maximizes the likelihood of the samples under the
    pullback of the background density through the gradient map.  The
    Hessian must be positive definite at every sample; the error names the
    first violating sample (raise the curvature floor of the potential if
    this happens).
    """

    order = 2

    def __init__(self, background):
        self.background = background

    def per_sample(self, bundle, X):
        _, logdet = chol_logdet(bundle.hess, context="log-likelihood loss")
        return -(logdet + self.background.log_density(bundle.grad))

    def adjoints(self, bundle, X):
        n = bundle.n
        chol_logdet(bundle.hess, context="log-likelihood loss")
        hinv = np.linalg.inv(bundle.hess)
        hbar = -0.5 * (hinv + hinv.swapaxes(-1, -2)) / n
        gbar = -self.background.grad_log_density(bundle.grad) / n
        return np.zeros(n), gbar, hbar


class MapTargetLoss(LossFunctional):
    """Mean squared deviation of the gradient map from given targets.

    With targets equal to the inputs this is the identity-pretraining
    loss; with targets x and inputs grad u(x) it is the inverse-map loss.
    """

    order = 1

    def __init__(self, targets):
        self.targets = np.atleast_2d(np.asarray(targets, dtype=float))

    def per_sample(self, bundle, X):
        diff = bundle.grad - self.targets
        return np.einsum("ni,ni->n", diff, diff)

    def adjoints(self, bundle, X):
        gbar = 2.0 * (bundle.grad - self.targets) / bundle.n
        return np.zeros(bundle.n), gbar, None


# -- spec-level loss evaluation -----------------------------------------------


def monge_ampere_residual_loss(u, source, target, collocation):
    """Mean squared Monge-Ampere residual of potential ``u`` on a batch."""
    X = np.atleast_2d(np.asarray(collocation, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty collocation batch")
    loss = MongeAmpereResidual(source, target)
    return float(loss.per_sample(u.bundle(X, order=2), X).mean())


def nll_loss(u, samples, background):
    """Pullback negative log-likelihood of ``samples`` under ``u``."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty sample batch")
    loss = PullbackNLL(background)
    return float(loss.per_sample(u.bundle(X, order=2), X).mean())


def inverse_loss(v, u, batch):
    """Mean squared inverse-consistency error |grad v(grad u(x)) - x|^2."""
    X = np.atleast_2d(np.asarray(batch, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    Y = u.bundle(X, order=1).grad
    diff = v.bundle(Y, order=1).grad - X
    return float(np.einsum("ni,ni->n", diff, diff).mean())


def w2_estimate(u, source, n, seed, chunk=100_000):
    """Monte Carlo displacement cost of the map grad u over the source.

    Returns (w2_squared, w2).
    """
    n = int(n)
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    total = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        X = source.sample(m, rng)
        disp = u.bundle(X, order=1).grad - X
        total += float(np.einsum("ni,ni->", disp, disp))
        done += m
    w2sq = total / n if n else 0.0
    return w2sq, math.sqrt(max(w2sq, 0.0))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def _lr_at(base, schedule, it, total):
    """Step size at iteration ``it`` of ``total`` under the schedule."""
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * it / max(total, 1)))
    return base


class Adam:
    """Adaptive-moment gradient step on a flat parameter vector."""

    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)

    def step(self, theta, grad):
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """All knobs of one training run; one seed drives every stream."""

    seed: int = 0
    learning_rate: float = 1e-3
    iterations: int = 10_000
    batch_size: int = 1024
    widths: tuple = (128, 128, 128)
    alpha: float = 1.1
    quad: float = 0.0
    loss: str = "residual"  # "residual" | "likelihood"
    collocation: str = "source"  # "source" | "standard"
    lr_schedule: str = "cosine"  # "cosine" | "constant"
    pretrain_iterations: int = 2000
    pretrain_tolerance: float | None = None  # default 1e-3 * d
    pretrain_learning_rate: float | None = None  # default: 3x learning_rate
    clamp_after_step: bool = True
    init_scale: float = 0.5
    inverse_iterations: int | None = None  # default: same as iterations
    inverse_learning_rate: float | None = None  # default: same as learning_rate
    holdout: int = 2048

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        for name in ("iterations", "batch_size", "pretrain_iterations", "holdout"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.loss not in ("residual", "likelihood"):
            raise ValueError("loss must be 'residual' or 'likelihood'")
        if self.collocation not in ("source", "standard"):
            raise ValueError("collocation must be 'source' or 'standard'")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if len(self.widths) == 0 or min(self.widths) < 1:
            raise ValueError("widths must be a non-empty tuple of positive ints")
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        if self.quad < 0.0:
            raise ValueError("quad must be >= 0")
        return self

    def resolved(self, d):
        """Config with every default made explicit for dimension d."""
        return replace(
            self,
            widths=tuple(self.widths),
            pretrain_tolerance=(
                self.pretrain_tolerance
                if self.pretrain_tolerance is not None
                else 1e-3 * d
            ),
            pretrain_learning_rate=(
                self.pretrain_learning_rate
                if self.pretrain_learning_rate is not None
                else 3.0 * self.learning_rate
            ),
            inverse_iterations=(
                self.inverse_iterations
                if self.inverse_iterations is not None
                else self.iterations
            ),
            inverse_learning_rate=(
                self.inverse_learning_rate
                if self.inverse_learning_rate is not None
                else self.learning_rate
            ),
        )


@dataclass
class PretrainResult:
    final_loss: float
    reached: bool
    iterations: int


@dataclass
class TrainedPair:
    """Forward potential, inverse potential, and the full run record."""

    u: ICNN
    v: ICNN
    config: TrainConfig
    mode: str
    history: dict = field(default_factory=dict)
    pretrain_u: PretrainResult | None = None
    pretrain_v: PretrainResult | None = None
    inverse_mse: float = float("nan")
    holdout_samples: np.ndarray | None = None
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def pretrain_identity(
    model, iterations, tolerance, lr, batch_size, rng, history=None, schedule="cosine"
):
    """Drive grad u toward the identity on unit-Gaussian collocation points.

    Stops once the minibatch loss drops below ``tolerance``; hitting the
    iteration cap instead logs a warning and reports reached=False.
    """
    adam = Adam(model.n_params, lr=lr)
    mask = model.constrained_mask()
    final = float("inf")
    start = time.perf_counter()
    for it in range(int(iterations)):
        X = rng.standard_normal((batch_size, model.dim))
        loss = MapTargetLoss(X)
        value, grad = param_gradient(loss, model, model.theta, X)
        if not np.isfinite(value):
            raise TrainingDiverged(f"identity pretraining diverged at iteration {it}")
        adam.lr = _lr_at(lr, schedule, it, iterations)
        adam.step(model.theta, grad)
        np.maximum(model.theta, 0.0, where=mask, out=model.theta)
        final = value
        if history is not None:
            history.append((it, value, time.perf_counter() - start))
        if value < tolerance:
            return PretrainResult(final, True, it + 1)
    reached = final < tolerance
    if not reached and iterations > 0:
        log.warning(
            "identity pretraining stopped at %.3g (tolerance %.3g)", final, tolerance
        )
    return PretrainResult(final, reached, int(iterations))


class _EpochSampler:
    """Deterministic minibatches by reshuffled epochs (tail dropped)."""

    def __init__(self, data, batch_size, rng):
        self.data = data
        self.batch = min(int(batch_size), data.shape[0])
        self.rng = rng
        self.perm = None
        self.pos = 0

    def next(self):
        if self.perm is None or self.pos + self.batch > self.data.shape[0]:
            self.perm = self.rng.permutation(self.data.shape[0])
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return self.data[idx]


def train(config: TrainConfig, source=None, target=None, samples=None, background=None):
    """Fit the forward potential and its inverse per the configuration.

    residual mode: ``source`` and ``target`` are evaluable densities; fresh
    collocation batches are drawn from the source (or the unit Gaussian
    when config.collocation == "standard") every iteration.

    likelihood mode: ``samples`` (n, d) and an evaluable ``background``
    density; ``config.holdout`` samples are split off first and used only
    for the held-out inverse-consistency metric.

    Raises TrainingDiverged (history attached) if the loss goes non-finite.
    """
    config.validate()
    t_start = time.perf_counter()

    if config.loss == "residual":
        if source is None or target is None:
            raise ValueError("residual mode needs source and target densities")
        d = source.d
        if target.d != d:
            raise ValueError("source and target dimensions differ")
    else:
        if samples is None or background is None:
            raise ValueError("likelihood mode needs samples and a background density")
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[0] == 0:
            raise ValueError("empty sample set")
        d = samples.shape[1]
        if background.d != d:
            raise ValueError(
                f"samples have dimension {d}, background has {background.d}"
            )

    cfg = config.resolved(d)
    ss = np.random.SeedSequence(cfg.seed)
    (s_init_u, s_pre_u, s_main, s_init_v, s_pre_v, s_inv, s_hold) = ss.spawn(7)
    rng_pre_u = np.random.default_rng(s_pre_u)
    rng_main = np.random.default_rng(s_main)
    rng_pre_v = np.random.default_rng(s_pre_v)
    rng_inv = np.random.default_rng(s_inv)
    rng_hold = np.random.default_rng(s_hold)

    history = {"pretrain_u": [], "main": [], "pretrain_v": [], "inverse": []}

    # holdout split (likelihood mode) and data streams
    if cfg.loss == "likelihood":
        n_hold = min(cfg.holdout, samples.shape[0] // 4)
        perm = rng_hold.permutation(samples.shape[0])
        hold_X = samples[perm[:n_hold]]
        train_X = samples[perm[n_hold:]]
        main_batches = _EpochSampler(train_X, cfg.batch_size, rng_main)
        inv_batches = _EpochSampler(train_X, cfg.batch_size, rng_inv)
    else:
        colloc = source if cfg.collocation == "source" else None
        hold_X = None  # drawn later from the source

    u = init_icnn(d, cfg.widths, s_init_u, alpha=cfg.alpha, scale=cfg.init_scale, quad=cfg.quad)
    pre_u = pretrain_identity(
        u,
        cfg.pretrain_iterations,
        cfg.pretrain_tolerance,
        cfg.pretrain_learning_rate,
        min(cfg.batch_size, 512),
        rng_pre_u,
        history["pretrain_u"],
        cfg.lr_schedule,
    )

    if cfg.loss == "residual":
        main_loss = MongeAmpereResidual(source, target)
    else:
        main_loss = PullbackNLL(background)

    adam = Adam(u.n_params, lr=cfg.learning_rate)
    mask = u.constrained_mask()
    t_main = time.perf_counter()
    for it in range(cfg.iterations):
        if cfg.loss == "residual":
            X = (
                colloc.sample(cfg.batch_size, rng_main)
                if colloc is not None
                else rng_main.standard_normal((cfg.batch_size, d))
            )
        else:
            X = main_batches.next()
        try:
            value, grad = param_gradient(main_loss, u, u.theta, X)
        except DiffEngineError as exc:
            raise TrainingDiverged(
                f"main loss diverged at iteration {it}: {exc}", history
            ) from exc
        if not (np.isfinite(value) and np.isfinite(grad).all()):
            raise TrainingDiverged(
                f"main loss diverged at iteration {it}", history
            )
        adam.lr = _lr_at(cfg.learning_rate, cfg.lr_schedule, it, cfg.iterations)
        adam.step(u.theta, grad)
        if cfg.clamp_after_step:
            np.maximum(u.theta, 0.0, where=mask, out=u.theta)
        history["main"].append((it, value, time.perf_counter() - t_main))
    if cfg.clamp_after_step:
        u.assert_feasible()

    # inverse potential: regress grad v(grad u(x)) onto x with u frozen
    v = init_icnn(d, cfg.widths, s_init_v, alpha=cfg.alpha, scale=cfg.init_scale, quad=cfg.quad)
    pre_v = pretrain_identity(
        v,
        cfg.pretrain_iterations,
        cfg.pretrain_tolerance,
        cfg.pretrain_learning_rate,
        min(cfg.batch_size, 512),
        rng_pre_v,
        history["pretrain_v"],
        cfg.lr_schedule,
    )
    adam_v = Adam(v.n_params, lr=cfg.inverse_learning_rate)
    mask_v = v.constrained_mask()
    t_inv = time.perf_counter()
    for it in range(cfg.inverse_iterations):
        if cfg.loss == "residual":
            X = source.sample(cfg.batch_size, rng_inv)
        else:
            X = inv_batches.next()
        Y = u.bundle(X, order=1).grad
        try:
            value, grad = param_gradient(MapTargetLoss(X), v, v.theta, Y)
        except DiffEngineError as exc:
            raise TrainingDiverged(
                f"inverse loss diverged at iteration {it}: {exc}", history
            ) from exc
        if not (np.isfinite(value) and np.isfinite(grad).all()):
            raise TrainingDiverged(
                f"inverse loss diverged at iteration {it}", history
            )
        adam_v.lr = _lr_at(
            cfg.inverse_learning_rate, cfg.lr_schedule, it, cfg.inverse_iterations
        )
        adam_v.step(v.theta, grad)
        if cfg.clamp_after_step:
            np.maximum(v.theta, 0.0, where=mask_v, out=v.theta)
        history["inverse"].append((it, value, time.perf_counter() - t_inv))

    if hold_X is None:
        hold_X = source.sample(cfg.holdout, rng_hold) if cfg.holdout else None
    inverse_mse = (
        inverse_loss(v, u, hold_X) if hold_X is not None and len(hold_X) else float("nan")
    )

    return TrainedPair(
        u=u,
        v=v,
        config=cfg,
        mode=cfg.loss,
        history=history,
        pretrain_u=pre_u,
        pretrain_v=pre_v,
        inverse_mse=inverse_mse,
        holdout_samples=hold_X,
        wall_time=time.perf_counter() - t_start,
    )

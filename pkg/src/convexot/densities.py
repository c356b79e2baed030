"""Density zoo: exact log-densities, seeded samplers, and transport
references with closed-form optimal maps.

Every density knows its log-density, the gradient of the log-density
(where tractable), a seeded sampler, and analytic moments when they exist.
Reference problems bundle a source/target pair with the true optimal map,
its inverse, and the true squared Wasserstein-2 cost.

All pseudo-randomness comes from ``numpy.random.default_rng`` (PCG64); a
``seed`` argument accepts either an integer or an existing Generator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .derivatives import AffinePotential, RadialQuarticPotential, ScalarField
from .icnn import ICNN, init_icnn
from .numerics import (
    NonPDHessianError,
    chol_logdet,
    inv_sqrtm_spd,
    logsumexp,
    sqrtm_spd,
)

__all__ = [
    "Density",
    "StandardGaussian",
    "Gaussian",
    "GaussianMixture",
    "Annulus",
    "NetPushforward",
    "ReferencePair",
    "gaussian_ot_map",
    "annulus_reference",
    "random_convex_reference",
    "random_gaussian_pair",
    "invert_gradient_map",
    "write_samples",
    "read_samples",
    "density_from_dict",
]

log = logging.getLogger("convexot")

_LOG_2PI = math.log(2.0 * math.pi)


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class Density:
    """Interface of every density in the zoo."""

    d: int

    def log_density(self, X):
        raise NotImplementedError

    def grad_log_density(self, X):
        raise NotImplementedError

    def sample(self, n, seed):
        raise NotImplementedError

    def mean(self):
        """Analytic mean, or None when not tractable."""
        return None

    def total_variance(self):
        """Trace of the covariance (sum of per-coordinate variances), or
        None when not tractable."""
        return None

    def to_dict(self):
        raise NotImplementedError

    def density(self, X):
        return np.exp(self.log_density(X))


class StandardGaussian(Density):
    """Unit Gaussian N(0, I_d)."""

    def __init__(self, d):
        if d < 1:
            raise ValueError("dimension must be >= 1")
        self.d = int(d)

    def log_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return -0.5 * (self.d * _LOG_2PI + np.einsum("ni,ni->n", X, X))

    def grad_log_density(self, X):
        return -np.atleast_2d(np.asarray(X, dtype=float))

    def sample(self, n, seed):
        return _as_rng(seed).standard_normal((int(n), self.d))

    def mean(self):
        return np.zeros(self.d)

    def total_variance(self):
        return float(self.d)

    def to_dict(self):
        return {"kind": "standard_gaussian", "d": self.d}


class Gaussian(Density):
    """N(mean, cov) with SPD covariance (Cholesky checked at construction)."""

    def __init__(self, mean, cov):
        self.mean_vec = np.asarray(mean, dtype=float).ravel()
        self.d = self.mean_vec.shape[0]
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (self.d, self.d):
            raise ValueError(f"covariance shape {cov.shape} does not match d={self.d}")
        self.cov = 0.5 * (cov + cov.T)
        L, logdet = chol_logdet(self.cov[None], context="covariance")
        self.chol = L[0]
        self._logdet = float(logdet[0])
        prec = np.linalg.inv(self.cov)
        self.prec = 0.5 * (prec + prec.T)

    def log_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = X - self.mean_vec
        quad = np.einsum("ni,ij,nj->n", r, self.prec, r)
        return -0.5 * (self.d * _LOG_2PI + self._logdet + quad)

    def grad_log_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return -(X - self.mean_vec) @ self.prec

    def sample(self, n, seed):
        z = _as_rng(seed).standard_normal((int(n), self.d))
        return self.mean_vec + z @ self.chol.T

    def mean(self):
        return self.mean_vec.copy()

    def total_variance(self):
        return float(np.trace(self.cov))

    def to_dict(self):
        return {
            "kind": "gaussian",
            "mean": self.mean_vec.tolist(),
            "cov": self.cov.tolist(),
        }


class GaussianMixture(Density):
    """Finite mixture of Gaussians; weights must sum to one."""

    def __init__(self, weights, components):
        self.weights = np.asarray(weights, dtype=float).ravel()
        self.components = list(components)
        if len(self.components) != self.weights.shape[0]:
            raise ValueError("one weight per component required")
        if (self.weights < 0).any():
            raise ValueError("mixture weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1 within 1e-12")
        dims = {c.d for c in self.components}
        if len(dims) != 1:
            raise ValueError("components must share one dimension")
        self.d = dims.pop()

    def _component_logs(self, X):
        return np.stack([c.log_density(X) for c in self.components], axis=1)

    def log_density(self, X):
        logs = self._component_logs(X) + np.log(self.weights)
        return logsumexp(logs, axis=1)

    def grad_log_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        logs = self._component_logs(X) + np.log(self.weights)
        post = np.exp(logs - logsumexp(logs, axis=1)[:, None])
        scores = np.stack([c.grad_log_density(X) for c in self.components], axis=1)
        return np.einsum("nk,nki->ni", post, scores)

    def sample(self, n, seed):
        rng = _as_rng(seed)
        n = int(n)
        idx = rng.choice(len(self.components), size=n, p=self.weights)
        z = rng.standard_normal((n, self.d))
        means = np.stack([c.mean_vec for c in self.components])
        chols = np.stack([c.chol for c in self.components])
        return means[idx] + np.einsum("nij,nj->ni", chols[idx], z)

    def mean(self):
        means = np.stack([c.mean_vec for c in self.components])
        return self.weights @ means

    def total_variance(self):
        m = self.mean()
        second = sum(
            w * (np.trace(c.cov) + c.mean_vec @ c.mean_vec)
            for w, c in zip(self.weights, self.components)
        )
        return float(second - m @ m)

    def to_dict(self):
        return {
            "kind": "mixture",
            "weights": self.weights.tolist(),
            "components": [c.to_dict() for c in self.components],
        }


class Annulus(Density):
    """Ring-shaped pullback of the unit Gaussian through x -> (x^T x) x.

    Density f(x) = g((x^T x) x) * 3 (x^T x)^d with g the unit Gaussian; in
    radial terms log f = -d/2 log(2 pi) - r^6/2 + log 3 + 2 d log r.
    Samples are y |y|^(-2/3) with y unit Gaussian.
    """

    def __init__(self, d):
        if d < 1:
            raise ValueError("dimension must be >= 1")
        self.d = int(d)

    def log_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r2 = np.einsum("ni,ni->n", X, X)
        with np.errstate(divide="ignore"):
            return (
                -0.5 * self.d * _LOG_2PI
                - 0.5 * r2**3
                + math.log(3.0)
                + self.d * np.log(r2)
            )

    def grad_log_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r2 = np.einsum("ni,ni->n", X, X)
        with np.errstate(divide="ignore"):
            coef = -3.0 * r2**2 + 2.0 * self.d / r2
        return coef[:, None] * X

    def sample(self, n, seed):
        y = _as_rng(seed).standard_normal((int(n), self.d))
        r = np.linalg.norm(y, axis=1)
        scale = np.where(r > 0.0, r ** (-2.0 / 3.0), 0.0)
        return y * scale[:, None]

    def mean(self):
        return np.zeros(self.d)

    def total_variance(self):
        # E||x||^2 = E chi_d^(2/3), chi moments via the gamma function
        return _chi_moment(self.d, 2.0 / 3.0)

    def to_dict(self):
        return {"kind": "annulus", "d": self.d}


def _chi_moment(d, k):
    """E ||y||^k for y ~ N(0, I_d)."""
    return float(
        2 ** (k / 2.0) * math.exp(math.lgamma((d + k) / 2.0) - math.lgamma(d / 2.0))
    )


class NetPushforward(Density):
    """Density induced by pushing a background through a gradient map.

    direction="forward": the law of grad u(Y) with Y ~ background.  Its
    log-density requires inverting the gradient map (Newton solve on the
    strictly convex potential).

    direction="inverse": the pullback of the background through grad u,
    log f(x) = log det D2u(x) + log g(grad u(x)); sampling requires the
    Newton inversion instead.

    The potential must be strictly convex (positive-definite Hessian) for
    either direction to be well defined.
    """

    def __init__(self, direction, potential, background):
        if direction not in ("forward", "inverse"):
            raise ValueError("direction must be 'forward' or 'inverse'")
        self.direction = direction
        self.potential = potential
        self.background = background
        self.d = potential.dim
        if background.d != self.d:
            raise ValueError("background dimension does not match the potential")

    def log_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.direction == "inverse":
            b = self.potential.bundle(X, order=2)
            _, logdet = chol_logdet(b.hess, context="pullback log-density")
            return self.background.log_density(b.grad) + logdet
        Xstar = invert_gradient_map(self.potential, X)
        b = self.potential.bundle(Xstar, order=2)
        _, logdet = chol_logdet(b.hess, context="pushforward log-density")
        return self.background.log_density(Xstar) - logdet

    def grad_log_density(self, X):
        raise NotImplementedError(
            "grad of a net-pushforward log-density needs third input "
            "derivatives of the potential; use it as data, not as a "
            "training target"
        )

    def sample(self, n, seed):
        y = self.background.sample(n, seed)
        if int(n) == 0:
            return y
        if self.direction == "forward":
            return self.potential.bundle(y, order=1).grad
        return invert_gradient_map(self.potential, y)

    def to_dict(self):
        if not isinstance(self.potential, ICNN):
            raise ValueError("only ICNN potentials serialize")
        return {
            "kind": "net_pushforward",
            "direction": self.direction,
            "model": self.potential.to_json(),
            "background": self.background.to_dict(),
        }


def invert_gradient_map(potential, Y, tol=1e-10, max_iter=60):
    """Solve grad u(x) = y row-wise by damped Newton on u(x) - y.x.

    The potential must be strictly convex; each step solves with the exact
    Hessian and backtracks on the convex merit, so iterates converge for
    any starting point.  Returns X with grad u(X) = Y to ``tol`` (inf-norm,
    relative to 1 + |y|).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = Y.copy()
    scale = 1.0 + np.abs(Y).max(axis=1)
    for _ in range(max_iter):
        b = potential.bundle(X, order=2)
        resid = b.grad - Y
        err = np.abs(resid).max(axis=1) / scale
        active = err > tol
        if not active.any():
            return X
        chol_logdet(b.hess[active], context="gradient-map inversion")
        step = -np.linalg.solve(b.hess[active], resid[active][..., None])[..., 0]
        merit0 = b.value[active] - np.einsum(
            "ni,ni->n", Y[active], X[active]
        )
        slope = np.einsum("ni,ni->n", resid[active], step)
        t = np.ones(step.shape[0])
        Xa = X[active]
        # sufficient-decrease test with a roundoff allowance so the last
        # quadratic-convergence steps are not rejected on noise
        fuzz = 4e-15 * (1.0 + np.abs(merit0))
        for _ in range(40):
            Xtry = Xa + t[:, None] * step
            btry = potential.bundle(Xtry, order=1)
            merit = btry.value - np.einsum("ni,ni->n", Y[active], Xtry)
            ok = merit <= merit0 + 1e-4 * t * slope + fuzz
            if ok.all():
                break
            t = np.where(ok, t, 0.5 * t)
        X[active] = Xa + t[:, None] * step
    b = potential.bundle(X, order=1)
    err = np.abs(b.grad - Y).max(axis=1) / scale
    if (err > 100 * tol).any():
        bad = int(np.argmax(err))
        raise RuntimeError(
            f"gradient-map inversion stalled at row {bad} (residual {err[bad]:.3g})"
        )
    return X


# ---------------------------------------------------------------------------
# Reference problems with known optimal maps
# ---------------------------------------------------------------------------


@dataclass
class ReferencePair:
    """Source/target pair with the ground-truth optimal transport data."""

    source: Density
    target: Density
    true_map: Callable[[np.ndarray], np.ndarray]
    true_inverse: Callable[[np.ndarray], np.ndarray] | None = None
    true_w2sq: float | None = None
    true_potential: ScalarField | None = None
    info: dict = field(default_factory=dict)

    @property
    def true_w2(self):
        return None if self.true_w2sq is None else math.sqrt(self.true_w2sq)


def gaussian_ot_map(src: Gaussian, dst: Gaussian) -> ReferencePair:
    """Closed-form optimal transport between Gaussians.

    T(x) = m2 + A (x - m1) with
    A = S1^(-1/2) (S1^(1/2) S2 S1^(1/2))^(1/2) S1^(-1/2), and
    W2^2 = |m1 - m2|^2 + tr(S1 + S2 - 2 (S1^(1/2) S2 S1^(1/2))^(1/2)).
    """
    if not isinstance(src, (Gaussian, StandardGaussian)):
        raise ValueError("source must be Gaussian")
    if not isinstance(dst, (Gaussian, StandardGaussian)):
        raise ValueError("target must be Gaussian")
    src_g = _as_full_gaussian(src)
    dst_g = _as_full_gaussian(dst)
    m1, S1 = src_g.mean_vec, src_g.cov
    m2, S2 = dst_g.mean_vec, dst_g.cov
    root = sqrtm_spd(S1)
    iroot = inv_sqrtm_spd(S1)
    mid = sqrtm_spd(root @ S2 @ root)
    A = iroot @ mid @ iroot
    A = 0.5 * (A + A.T)
    b = m2 - A @ m1
    w2sq = float(np.sum((m1 - m2) ** 2) + np.trace(S1) + np.trace(S2) - 2.0 * np.trace(mid))
    w2sq = max(w2sq, 0.0)
    Ainv = np.linalg.inv(A)
    Ainv = 0.5 * (Ainv + Ainv.T)

    def true_map(X):
        return np.atleast_2d(np.asarray(X, dtype=float)) @ A.T + b

    def true_inverse(Y):
        return (np.atleast_2d(np.asarray(Y, dtype=float)) - b) @ Ainv.T

    return ReferencePair(
        source=src,
        target=dst,
        true_map=true_map,
        true_inverse=true_inverse,
        true_w2sq=w2sq,
        true_potential=AffinePotential(A, b),
        info={"kind": "gaussian_pair"},
    )


def _as_full_gaussian(g):
    if isinstance(g, StandardGaussian):
        return Gaussian(np.zeros(g.d), np.eye(g.d))
    return g


def annulus_reference(d) -> ReferencePair:
    """Annulus -> unit Gaussian with the radially cubic map (x^T x) x.

    The inverse map is y -> y |y|^(-2/3); the squared distance is the
    analytic displacement cost E r^2 (1 - r^2)^2 under the annulus law.
    """
    source = Annulus(d)
    target = StandardGaussian(d)

    def true_map(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.einsum("ni,n->ni", X, np.einsum("ni,ni->n", X, X))

    def true_inverse(Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        r = np.linalg.norm(Y, axis=1)
        scale = np.where(r > 0.0, r ** (-2.0 / 3.0), 0.0)
        return Y * scale[:, None]

    # E s^(2/3) - 2 E s^(4/3) + E s^2 for s = chi_d (pushforward identity
    # r_x = s^(1/3))
    w2sq = (
        _chi_moment(d, 2.0 / 3.0) - 2.0 * _chi_moment(d, 4.0 / 3.0) + float(d)
    )
    return ReferencePair(
        source=source,
        target=target,
        true_map=true_map,
        true_inverse=true_inverse,
        true_w2sq=w2sq,
        true_potential=RadialQuarticPotential(d),
        info={"kind": "annulus"},
    )


def random_convex_reference(
    d, widths, seed, scale=0.5, quad=1.0, w2_samples=1_000_000
) -> ReferencePair:
    """Unit Gaussian pushed forward by the gradient of a random convex net.

    The generator is a random ICNN plus a unit curvature floor, so its map
    is a strictly monotone random deformation of the identity.  The true
    squared distance is Monte Carlo displacement cost over ``w2_samples``
    source draws (sample count and seed recorded in ``info``).
    """
    ss = np.random.SeedSequence(seed)
    net_seed, w2_seed = ss.spawn(2)
    gen = init_icnn(d, widths, seed=net_seed, scale=scale, quad=quad)
    source = StandardGaussian(d)
    target = NetPushforward("forward", gen, source)

    def true_map(X):
        return gen.bundle(X, order=1).grad

    def true_inverse(Y):
        return invert_gradient_map(gen, Y)

    total = 0.0
    count = 0
    rng = np.random.default_rng(w2_seed)
    chunk = 100_000
    while count < w2_samples:
        m = min(chunk, w2_samples - count)
        X = source.sample(m, rng)
        disp = true_map(X) - X
        total += float(np.einsum("ni,ni->", disp, disp))
        count += m
    w2sq = total / w2_samples
    return ReferencePair(
        source=source,
        target=target,
        true_map=true_map,
        true_inverse=true_inverse,
        true_w2sq=w2sq,
        true_potential=gen,
        info={
            "kind": "random_convex",
            "w2_samples": int(w2_samples),
            "generator_scale": scale,
            "generator_quad": quad,
            "generator_widths": list(widths),
        },
    )


def random_gaussian_pair(d, seed):
    """Two random Gaussians: means uniform on [-1, 1]^d, covariance AA^T
    from a d x 3d matrix with entries uniform on [0, 0.75].

    A Cholesky failure (measure-zero) logs the event and redraws with the
    seed advanced.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    attempt = 0
    base = seed
    while True:
        rng = np.random.default_rng(None if base is None else base)
        try:
            out = []
            for _ in range(2):
                mean = rng.uniform(-1.0, 1.0, size=d)
                A = rng.uniform(0.0, 0.75, size=(d, 3 * d))
                out.append(Gaussian(mean, A @ A.T))
            return tuple(out)
        except NonPDHessianError:
            attempt += 1
            log.warning(
                "degenerate random covariance for seed %r, resampling (attempt %d)",
                base,
                attempt,
            )
            base = (base if isinstance(base, int) else 0) + 1
            if attempt > 16:
                raise


# ---------------------------------------------------------------------------
# Sample batches on disk
# ---------------------------------------------------------------------------


def write_samples(path, X):
    """Comma-separated batch: header x0..x{d-1}, one row per sample, full
    float precision."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    header = ",".join(f"x{i}" for i in range(X.shape[1]))
    np.savetxt(path, X, fmt="%.17g", delimiter=",", header=header, comments="")


def read_samples(path):
    with open(path) as fh:
        header = fh.readline().strip()
        cols = header.split(",") if header else []
        if not cols or cols[0] != "x0":
            raise ValueError(f"{path}: expected a sample header like x0,x1,...")
        d = len(cols)
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        return np.empty((0, d))
    if data.shape[1] != d:
        raise ValueError(f"{path}: rows have {data.shape[1]} columns, header has {d}")
    return data


def density_from_dict(doc):
    """Rebuild a density from its tagged dictionary form."""
    kind = doc.get("kind")
    if kind == "standard_gaussian":
        return StandardGaussian(doc["d"])
    if kind == "gaussian":
        return Gaussian(doc["mean"], doc["cov"])
    if kind == "mixture":
        return GaussianMixture(
            doc["weights"], [density_from_dict(c) for c in doc["components"]]
        )
    if kind == "annulus":
        return Annulus(doc["d"])
    if kind == "net_pushforward":
        return NetPushforward(
            doc["direction"],
            ICNN.from_json(doc["model"]),
            density_from_dict(doc["background"]),
        )
    raise ValueError(f"unknown density kind: {kind!r}")

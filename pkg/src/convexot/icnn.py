"""Input-convex network representing a convex transport potential.

The network output u(x) is convex in x by construction: hidden-to-hidden
weights are kept non-negative and the activation is convex and nondecreasing
(softplus raised to a power alpha >= 1).  The induced candidate transport
map is the input gradient of u.
"""

from __future__ import annotations

import json

import numpy as np

from .derivatives import LayeredConvexField

__all__ = [
    "softplus_alpha",
    "SoftplusAlpha",
    "ICNN",
    "init_icnn",
]

# below this point softplus and its derivatives are replaced by their
# exp(x)-scale asymptotes; the relative error of the switch is ~exp(-35)
_ASYMPTOTIC_CUT = -35.0


def softplus_alpha_derivs(x, alpha, nderiv=2):
    """softplus(x)**alpha and its first ``nderiv`` derivatives (up to 3).

    The hot path is branch-free: softplus via logaddexp, the sigmoid as
    exp(x - softplus(x)) (exact at both tails), and a single fractional
    power shared by all derivative orders.  Inputs below the asymptotic
    cut are replaced by the exact exponential asymptote, where powers of a
    denormal softplus would overflow.  Requires alpha >= 1.
    """
    if alpha < 1.0:
        raise ValueError("activation exponent alpha must be >= 1")
    if not 0 <= nderiv <= 3:
        raise ValueError("nderiv must be in 0..3")
    x = np.atleast_1d(np.asarray(x, dtype=float))

    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        s = np.logaddexp(0.0, x)
        t = s ** (alpha - nderiv)  # lowest power; the rest by multiplication
        if nderiv == 0:
            out = [t]
        else:
            p = np.exp(x - s)
            if nderiv == 1:
                s_a1 = t
            elif nderiv == 2:
                s_a2 = t
                s_a1 = t * s
            else:
                s_a3 = t
                s_a2 = t * s
                s_a1 = s_a2 * s
            s_a0 = s_a1 * s
            out = [s_a0, alpha * s_a1 * p]
            if nderiv >= 2:
                # 1 - sigmoid(x) = exp(-softplus(x)) exactly, so the
                # sigmoid derivatives stay accurate in both tails
                pc = np.exp(-s)
                q = p * pc
                out.append(alpha * s_a2 * ((alpha - 1.0) * p * p + s * q))
            if nderiv >= 3:
                r = q * (pc - p)
                out.append(
                    alpha
                    * s_a3
                    * (
                        (alpha - 1.0) * (alpha - 2.0) * p**3
                        + 3.0 * (alpha - 1.0) * s * p * q
                        + s * s * r
                    )
                )

    lo = x <= _ASYMPTOTIC_CUT
    if lo.any():
        # softplus ~ e^x, so sigma^(k) ~ alpha^k e^(alpha x)
        e = np.exp(alpha * x[lo])
        for k in range(nderiv + 1):
            out[k][lo] = alpha**k * e
    return tuple(out)


def softplus_alpha(x, alpha=1.1):
    """(log(1 + e^x))^alpha evaluated stably; convex and nondecreasing for
    alpha >= 1."""
    scalar = np.isscalar(x)
    val = softplus_alpha_derivs(np.asarray(x, dtype=float), alpha, nderiv=0)[0]
    return float(val[0]) if scalar else val


class SoftplusAlpha:
    """Activation rule handing softplus^alpha derivative stacks to the
    derivative engine."""

    def __init__(self, alpha=1.1):
        if alpha < 1.0:
            raise ValueError("activation exponent alpha must be >= 1")
        self.alpha = float(alpha)

    def __call__(self, A, nderiv):
        return softplus_alpha_derivs(A, self.alpha, nderiv)

    def __eq__(self, other):
        return isinstance(other, SoftplusAlpha) and other.alpha == self.alpha


class ICNN(LayeredConvexField):
    """Convex potential network with its current weights attached.

    Hidden-to-hidden weights (and the hidden read-out) are constrained
    non-negative; input pass-through weights are free.  ``quad`` adds a
    fixed curvature floor quad/2 ||x||^2 to the potential, available when a
    strictly positive-definite Hessian is required.
    """

    def __init__(self, dim, widths, alpha=1.1, quad=0.0, theta=None):
        super().__init__(dim, widths, SoftplusAlpha(alpha), quad=quad)
        self.alpha = float(alpha)
        if theta is None:
            theta = np.zeros(self.n_params)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(
                f"theta has shape {theta.shape}, expected ({self.n_params},)"
            )
        self.theta = theta

    # -- evaluation sugar bound to self.theta --------------------------------

    def potential(self, X):
        """u(x) for each row of X."""
        return self.derivatives(self.theta, X, order=1).value

    def transport_map(self, X):
        """Candidate transport map: the input gradient of the potential."""
        return self.derivatives(self.theta, X, order=1).grad

    def hessian(self, X):
        """Input Hessian of the potential, (n, d, d)."""
        return self.derivatives(self.theta, X, order=2).hess

    # -- constraints ----------------------------------------------------------

    def project_nonneg(self):
        """Clamp constrained weights at zero, in place.  Idempotent."""
        mask = self.constrained_mask()
        np.maximum(self.theta, 0.0, where=mask, out=self.theta)
        return self

    def constraint_violation(self):
        """Most negative constrained weight (0 when feasible)."""
        vals = self.theta[self.constrained_mask()]
        return float(min(vals.min(initial=0.0), 0.0))

    def assert_feasible(self):
        if self.constraint_violation() < 0.0:
            raise AssertionError("constrained weights drifted below zero")

    def copy(self):
        return ICNN(self.dim, self.widths, self.alpha, self.quad, self.theta.copy())

    # -- serialization ---------------------------------------------------------

    def to_json(self):
        """Self-describing text form; weights row-major at full precision."""
        weights = {name: arr.tolist() for name, arr in self.unpack(self.theta).items()}
        doc = {
            "schema": "convexot-icnn-v1",
            "dim": self.dim,
            "widths": list(self.widths),
            "alpha": self.alpha,
            "quad": self.quad,
            "weights": weights,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("schema") != "convexot-icnn-v1":
            raise ValueError(f"unknown model schema: {doc.get('schema')!r}")
        model = cls(doc["dim"], doc["widths"], doc["alpha"], doc["quad"])
        views = model.unpack(model.theta)
        for name, _shape, _sl in model.layout:
            views[name][:] = np.asarray(doc["weights"][name], dtype=float).reshape(
                views[name].shape
            )
        return model

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def init_icnn(dim, widths, seed, alpha=1.1, scale=0.5, quad=0.0):
    """Random ICNN, reproducible from the seed.

    Weight matrices are drawn N(0, (scale/sqrt(fan_in))^2) in flat layout
    order from one PCG64 stream; constrained matrices take the absolute
    value of the draw, biases and the read-out offset start at zero.
    """
    if dim < 1:
        raise ValueError("input dimension must be >= 1")
    model = ICNN(dim, widths, alpha=alpha, quad=quad)
    rng = np.random.default_rng(seed)
    views = model.unpack(model.theta)
    for name, shape, _sl in model.layout:
        if name in ("b0", "c") or name.startswith("b"):
            continue
        arr = views[name]
        fan_in = shape[-1] if len(shape) > 1 else shape[0]
        draw = rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)
        if name.startswith("Wz") or name == "wz":
            draw = np.abs(draw)
        arr[:] = draw
    return model

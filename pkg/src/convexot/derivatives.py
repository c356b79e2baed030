"""Exact input derivatives and parameter gradients for layered scalar fields.

This module owns all differentiation used by the package.  A scalar field
u(theta, x) is evaluated together with its input gradient and input Hessian
by propagating (value, d/dx) analytically through the layer recurrence;
the input Hessian is assembled from its factored form

    D2u(x) = sum_l Ga_l(x)^T diag(e_l(x) * sigma''(A_l(x))) Ga_l(x)

where Ga_l are the pre-activation input gradients and e_l the effective
read-out weights accumulated through the layers (e_{l-1} = Wz_l^T (e_l *
sigma'(A_l))).  The same rank-one structure lets the reverse sweep carry
Hessian adjoints as per-unit scalar coefficients, so no (units, batch, d, d)
intermediate is ever materialized.  Parameter gradients of any loss built
from (value, gradient, Hessian) come from this hand-written reverse sweep.
Everything is plain numpy with fixed reduction orders, so results are
bitwise reproducible for a given thread count.

Shape conventions: inputs are batched as ``X (n, d)``; per-unit gradient
states are stored unit-major, ``G (k, n, d)``, so every layer contraction
is one contiguous matmul.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Bundle",
    "ScalarField",
    "LayeredConvexField",
    "QuadraticPotential",
    "AffinePotential",
    "RadialQuarticPotential",
    "LossFunctional",
    "eval_with_derivatives",
    "param_gradient",
    "finite_diff_check",
    "DiffReport",
    "DiffEngineError",
    "max_relative_error",
]


class DiffEngineError(RuntimeError):
    """Non-finite intermediate encountered during propagation."""

    def __init__(self, message, layer=None, sample=None):
        super().__init__(message)
        self.layer = layer
        self.sample = sample


@dataclass
class Bundle:
    """Field value with its exact input derivatives at a batch of points.

    value : (n,)       u(x)
    grad  : (n, d)     du/dx
    hess  : (n, d, d)  d^2u/dx^2, exactly symmetric as stored; None when the
                       evaluation was requested at order 1.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray | None = None

    @property
    def n(self):
        return self.value.shape[0]


class ScalarField(ABC):
    """A parameterized scalar field with derivative propagation.

    Parameters live in a flat float vector; subclasses define the layout.
    Evaluation must be deterministic and defined for all finite inputs.
    """

    dim: int
    n_params: int

    @abstractmethod
    def derivatives(self, theta, X, order=2):
        """Evaluate the field and its input derivatives at the rows of X.

        order=1 skips the Hessian; order=2 fills it.  Returns a Bundle.
        """

    @abstractmethod
    def derivatives_with_tape(self, theta, X, order=2):
        """Like :meth:`derivatives` but also returns a tape for
        :meth:`param_backward`."""

    @abstractmethod
    def param_backward(self, tape, vbar, gbar, hbar=None):
        """Accumulate dL/dtheta given adjoints of (value, grad, hess).

        vbar (n,), gbar (n, d) and hbar (n, d, d) are the derivatives of a
        scalar loss with respect to the bundle entries (hbar symmetric, or
        None when the loss ignores the Hessian).  Returns a flat array in
        the field's parameter layout.
        """

    def bundle(self, X, order=2):
        """Evaluate at the field's bound parameters ``self.theta``."""
        return self.derivatives(self.theta, X, order=order)


def _dot_last(A, B):
    """(A * B).sum(-1) with the last axis unrolled when it is short."""
    d = A.shape[-1]
    if d > 8:
        return np.einsum("...i,...i->...", A, B)
    out = A[..., 0] * B[..., 0]
    for i in range(1, d):
        out += A[..., i] * B[..., i]
    return out


def _symm_matvec(S, G):
    """P[k, n, :] = S[n] @ G[k, n, :] for symmetric S (n, d, d)."""
    d = G.shape[-1]
    if d > 8:
        return np.einsum("nab,knb->kna", S, G)
    P = np.empty_like(G)
    for a in range(d):
        acc = S[None, :, a, 0] * G[..., 0]
        for b in range(1, d):
            acc = acc + S[None, :, a, b] * G[..., b]
        P[..., a] = acc
    return P


# ---------------------------------------------------------------------------
# Layered convex field: the propagation scheme
# ---------------------------------------------------------------------------

# An activation rule returns the activation and its derivatives evaluated
# elementwise on pre-activations: act(A, nderiv) -> (sigma, sigma', ...,
# sigma^(nderiv)).
ActivationRule = Callable[[np.ndarray, int], tuple]


@dataclass
class _Tape:
    X: np.ndarray
    theta: np.ndarray
    order: int
    s: list = field(default_factory=list)    # activation derivative stacks
    z: list = field(default_factory=list)    # (n, k) post-activations
    Ga: list = field(default_factory=list)   # (k, n, d) pre-act input grads
    Gz: list = field(default_factory=list)   # (k, n, d) post-act input grads
    e: list | None = None                    # (k, n) effective read-outs


class LayeredConvexField(ScalarField):
    """Derivative propagation for the layered architecture

        z_1     = sigma(Wx_0 x + b_0)
        z_{l+1} = sigma(Wz_l z_l + Wx_l x + b_l),        l = 1..L-1
        u(x)    = wz . z_L + wx . x + c + quad * ||x||^2 / 2

    The activation and the layer shapes are fixed at construction; the flat
    parameter vector is interpreted through :meth:`unpack`.  ``quad`` is a
    fixed (non-trainable) curvature floor on the potential.
    """

    def __init__(self, dim, widths, activation: ActivationRule, quad=0.0):
        if len(widths) == 0:
            raise ValueError("at least one hidden layer is required")
        if min(widths) < 1:
            raise ValueError("hidden widths must be positive")
        self.dim = int(dim)
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.quad = float(quad)
        self._layout = self._build_layout()
        self.n_params = self._layout[-1][2].stop

    # -- parameter layout ---------------------------------------------------

    def _build_layout(self):
        """Flat layout: [Wx_0, b_0, (Wz_l, Wx_l, b_l) ..., wz, wx, c]."""
        d, ws = self.dim, self.widths
        entries = []
        off = 0

        def add(name, shape):
            nonlocal off
            size = int(np.prod(shape))
            entries.append((name, shape, slice(off, off + size)))
            off += size

        add("Wx0", (ws[0], d))
        add("b0", (ws[0],))
        for l in range(1, len(ws)):
            add(f"Wz{l}", (ws[l], ws[l - 1]))
            add(f"Wx{l}", (ws[l], d))
            add(f"b{l}", (ws[l],))
        add("wz", (ws[-1],))
        add("wx", (d,))
        add("c", (1,))
        return entries

    @property
    def layout(self):
        """List of (name, shape, flat-slice) describing the parameter
        vector; names carry the (layer, role) position."""
        return list(self._layout)

    def unpack(self, theta):
        """Views of a flat theta keyed by layout name (no copies)."""
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ValueError(
                f"theta has shape {theta.shape}, layout needs ({self.n_params},)"
            )
        return {name: theta[sl].reshape(shape) for name, shape, sl in self._layout}

    def constrained_mask(self):
        """Boolean mask over the flat layout, True where weights must stay
        non-negative (hidden-to-hidden paths and the hidden read-out)."""
        mask = np.zeros(self.n_params, dtype=bool)
        for name, _shape, sl in self._layout:
            if name.startswith("Wz") or name == "wz":
                mask[sl] = True
        return mask

    # -- forward ------------------------------------------------------------

    def derivatives(self, theta, X, order=2):
        bundle, _ = self._forward(theta, X, order, keep_tape=False)
        return bundle

    def derivatives_with_tape(self, theta, X, order=2):
        return self._forward(theta, X, order, keep_tape=True)

    def _forward(self, theta, X, order, keep_tape):
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, d = X.shape
        if d != self.dim:
            raise ValueError(f"input has dimension {d}, field expects {self.dim}")
        theta = np.asarray(theta, dtype=float)
        p = self.unpack(theta)
        L = len(self.widths)
        tape = _Tape(X=X, theta=theta, order=order) if keep_tape else None
        # the reverse sweep needs one more activation derivative than the
        # forward value/grad/hess math itself
        nderiv = order + (1 if keep_tape else 0)

        svals, zs, Gas, Gzs = [], [], [], []
        z = None
        Gz = None
        for l in range(L):
            if l == 0:
                A = X @ p["Wx0"].T + p["b0"]
                Ga = np.broadcast_to(p["Wx0"][:, None, :], (self.widths[0], n, d))
            else:
                Wz, Wx = p[f"Wz{l}"], p[f"Wx{l}"]
                k = Gz.shape[0]
                A = z @ Wz.T + X @ Wx.T + p[f"b{l}"]
                Ga = (Wz @ Gz.reshape(k, n * d)).reshape(-1, n, d) + Wx[:, None, :]
            s = self.activation(A, nderiv)
            z = s[0]
            Gz = s[1].T[:, :, None] * Ga
            svals.append(s)
            zs.append(z)
            Gas.append(Ga)
            Gzs.append(Gz)

        wz, wx, c = p["wz"], p["wx"], p["c"]
        value = z @ wz + X @ wx + c[0]
        grad = np.tensordot(wz, Gz, axes=(0, 0)) + wx

        hess = None
        es = None
        if order == 2:
            # effective read-out weight of each hidden unit, chained down
            es = [None] * L
            es[L - 1] = np.broadcast_to(wz[:, None], (self.widths[-1], n))
            for l in range(L - 1, 0, -1):
                es[l - 1] = p[f"Wz{l}"].T @ (es[l] * svals[l][1].T)
            hess = np.zeros((n, d, d))
            for l in range(L):
                coef = es[l] * svals[l][2].T
                Gw = Gas[l] * coef[:, :, None]
                hess += np.matmul(Gw.transpose(1, 2, 0), Gas[l].transpose(1, 0, 2))

        if self.quad != 0.0:
            value = value + 0.5 * self.quad * _dot_last(X, X)
            grad = grad + self.quad * X
            if order == 2:
                hess = hess + self.quad * np.eye(d)
        if order == 2:
            # exact symmetry of the stored Hessian, whatever the BLAS did
            hess = 0.5 * (hess + hess.transpose(0, 2, 1))

        if keep_tape:
            tape.s = svals
            tape.z = zs
            tape.Ga = Gas
            tape.Gz = Gzs
            tape.e = es
        return Bundle(value, grad, hess), tape

    def check_finite(self, theta, X):
        """Evaluate layer by layer; raise naming the first non-finite layer."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        p = self.unpack(np.asarray(theta, dtype=float))
        z = None
        for l in range(len(self.widths)):
            if l == 0:
                A = X @ p["Wx0"].T + p["b0"]
            else:
                A = z @ p[f"Wz{l}"].T + X @ p[f"Wx{l}"].T + p[f"b{l}"]
            if not np.isfinite(A).all():
                bad = np.argwhere(~np.isfinite(A))[0]
                raise DiffEngineError(
                    f"non-finite pre-activation in hidden layer {l} "
                    f"(sample {bad[0]}, unit {bad[1]})",
                    layer=l,
                    sample=int(bad[0]),
                )
            z = self.activation(A, 0)[0]
        out = z @ p["wz"] + X @ p["wx"] + p["c"][0]
        if not np.isfinite(out).all():
            bad = int(np.argwhere(~np.isfinite(out))[0][0])
            raise DiffEngineError(
                f"non-finite read-out value (sample {bad})",
                layer="readout",
                sample=bad,
            )

    # -- reverse ------------------------------------------------------------

    def param_backward(self, tape, vbar, gbar, hbar=None):
        """Reverse sweep over the tape.

        Hessian adjoints stay rank-one per sample (every upstream (d, d)
        adjoint is a scalar multiple of hbar[n]); the scalar coefficients
        are exactly the taped effective read-out weights e_l, and the
        (d, d) slots enter only through

            P_l[k, n, :] = hbar_n @ Ga_l[k, n, :]
            D_l[k, n]    = <hbar_n, Hz_l[k, n]>   (chained upward)
            E_l[k, n]    = <hbar_n, Ha_l[k, n]> = (Wz_l D_{l-1})[k, n].
        """
        X = tape.X
        n, d = X.shape
        L = len(self.widths)
        p = self.unpack(tape.theta)
        vbar = np.asarray(vbar, dtype=float)
        gbar = np.asarray(gbar, dtype=float)
        use_h = hbar is not None
        if use_h and tape.order < 2:
            raise ValueError("hbar supplied but the tape was recorded at order 1")
        if use_h:
            hbar = np.asarray(hbar, dtype=float)
            hbar = 0.5 * (hbar + hbar.transpose(0, 2, 1))

        out = np.zeros(self.n_params)
        g = {name: out[sl].reshape(shape) for name, shape, sl in self._layout}

        P = [None] * L
        PGa = [None] * L
        D = [None] * L
        E = [None] * L
        if use_h:
            for l in range(L):
                s = tape.s[l]
                Ga = tape.Ga[l]
                P[l] = _symm_matvec(hbar, Ga)
                PGa[l] = _dot_last(P[l], Ga)
                D[l] = s[2].T * PGa[l]
                if l > 0:
                    E[l] = p[f"Wz{l}"] @ D[l - 1]
                    D[l] += s[1].T * E[l]

        # read-out
        zL, GzL = tape.z[-1], tape.Gz[-1]
        kL = self.widths[-1]
        g["wz"][:] = vbar @ zL + GzL.reshape(kL, n * d) @ gbar.ravel()
        if use_h:
            g["wz"][:] += D[L - 1].sum(axis=1)
        g["wx"][:] = X.T @ vbar + gbar.sum(axis=0)
        g["c"][0] = vbar.sum()
        zbar = vbar[:, None] * p["wz"][None, :]
        Gzbar = p["wz"][:, None, None] * gbar[None, :, :]

        for l in range(L - 1, -1, -1):
            s = tape.s[l]
            Ga = tape.Ga[l]
            # adjoints through z = sigma(A), Gz = s1 Ga, Hz = s2 Ga Ga + s1 Ha
            Abar = zbar * s[1] + _dot_last(Gzbar, Ga).T * s[2]
            Gabar = s[1].T[:, :, None] * Gzbar
            if use_h:
                C = tape.e[l]
                Abar = Abar + (C * PGa[l]).T * s[3]
                if l > 0:
                    Abar = Abar + (C * E[l]).T * s[2]
                Gabar = Gabar + (2.0 * s[2].T * C)[:, :, None] * P[l]

            if l == 0:
                g["Wx0"][:] = Abar.T @ X + Gabar.sum(axis=1)
                g["b0"][:] = Abar.sum(axis=0)
                # the first layer has no z-path: no further adjoints flow
                break
            Wz = p[f"Wz{l}"]
            z_in, Gz_in = tape.z[l - 1], tape.Gz[l - 1]
            k = Gz_in.shape[0]
            j = Abar.shape[1]
            g[f"Wz{l}"][:] = Abar.T @ z_in + Gabar.reshape(j, n * d) @ Gz_in.reshape(
                k, n * d
            ).T
            if use_h:
                g[f"Wz{l}"][:] += (s[1].T * tape.e[l]) @ D[l - 1].T
            g[f"Wx{l}"][:] = Abar.T @ X + Gabar.sum(axis=1)
            g[f"b{l}"][:] = Abar.sum(axis=0)
            zbar = Abar @ Wz
            Gzbar = (Wz.T @ Gabar.reshape(j, n * d)).reshape(k, n, d)
        return out


# ---------------------------------------------------------------------------
# Closed-form reference potentials
# ---------------------------------------------------------------------------


class _AnalyticField(ScalarField):
    """Base for fields whose derivatives are written down in closed form."""

    def derivatives_with_tape(self, theta, X, order=2):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.derivatives(theta, X, order), (np.asarray(theta, float), X)

    def _prep(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"input has dimension {X.shape[1]}, expected {self.dim}")
        return X


class QuadraticPotential(_AnalyticField):
    """u(x) = w/2 ||x||^2 with a single trainable scale w.

    The gradient map is x -> w x; with w = 1 this is the identity map.
    """

    def __init__(self, dim, w=1.0):
        self.dim = int(dim)
        self.n_params = 1
        self.theta = np.array([float(w)])

    def derivatives(self, theta, X, order=2):
        X = self._prep(X)
        w = float(np.asarray(theta).ravel()[0])
        value = 0.5 * w * _dot_last(X, X)
        grad = w * X
        hess = None
        if order == 2:
            hess = np.broadcast_to(
                w * np.eye(self.dim), (X.shape[0],) + (self.dim,) * 2
            ).copy()
        return Bundle(value, grad, hess)

    def param_backward(self, tape, vbar, gbar, hbar=None):
        _theta, X = tape
        dw = float(np.sum(vbar * 0.5 * _dot_last(X, X)))
        dw += float(np.sum(gbar * X))
        if hbar is not None:
            dw += float(np.einsum("naa->", np.asarray(hbar)))
        return np.array([dw])


class AffinePotential(_AnalyticField):
    """u(x) = 1/2 x^T S x + b^T x with symmetric PSD S: grad = Sx + b.

    The exact potential of affine transport maps; parameters are the
    entries of (S, b) flattened, so perturbation tests stay possible.
    """

    def __init__(self, S, b):
        S = np.asarray(S, dtype=float)
        b = np.asarray(b, dtype=float)
        self.dim = b.shape[0]
        self.n_params = self.dim * self.dim + self.dim
        self.theta = np.concatenate([S.ravel(), b])

    def _unpack(self, theta):
        d = self.dim
        theta = np.asarray(theta, dtype=float).ravel()
        S = theta[: d * d].reshape(d, d)
        return 0.5 * (S + S.T), theta[d * d :]

    def derivatives(self, theta, X, order=2):
        X = self._prep(X)
        S, b = self._unpack(theta)
        value = 0.5 * _dot_last(X @ S, X) + X @ b
        grad = X @ S + b
        hess = None
        if order == 2:
            hess = np.broadcast_to(S, (X.shape[0],) + S.shape).copy()
        return Bundle(value, grad, hess)

    def param_backward(self, tape, vbar, gbar, hbar=None):
        theta, X = tape
        vbar = np.asarray(vbar)
        gbar = np.asarray(gbar)
        Sbar = 0.5 * np.einsum("n,ni,nj->ij", vbar, X, X)
        Sbar += np.einsum("ni,nj->ij", gbar, X)
        if hbar is not None:
            Sbar += np.asarray(hbar).sum(axis=0)
        bbar = X.T @ vbar + gbar.sum(axis=0)
        # account for the symmetrization S -> (S + S^T)/2 in _unpack
        Sbar = 0.5 * (Sbar + Sbar.T)
        return np.concatenate([Sbar.ravel(), bbar])


class RadialQuarticPotential(_AnalyticField):
    """u(x) = s/4 (x^T x)^2: the radially cubic gradient map (x^T x) x.

    This is the exact convex potential transporting the annulus-shaped
    reference density onto the unit Gaussian.
    """

    def __init__(self, dim, s=1.0):
        self.dim = int(dim)
        self.n_params = 1
        self.theta = np.array([float(s)])

    def derivatives(self, theta, X, order=2):
        X = self._prep(X)
        s = float(np.asarray(theta).ravel()[0])
        r2 = _dot_last(X, X)
        value = 0.25 * s * r2**2
        grad = s * r2[:, None] * X
        hess = None
        if order == 2:
            eye = np.eye(self.dim)
            hess = s * (r2[:, None, None] * eye + 2.0 * X[:, :, None] * X[:, None, :])
        return Bundle(value, grad, hess)

    def param_backward(self, tape, vbar, gbar, hbar=None):
        theta, X = tape
        r2 = _dot_last(X, X)
        ds = float(np.sum(np.asarray(vbar) * 0.25 * r2**2))
        ds += float(np.sum(np.asarray(gbar) * r2[:, None] * X))
        if hbar is not None:
            hb = np.asarray(hbar)
            ds += float(np.einsum("naa,n->", hb, r2))
            ds += 2.0 * float(np.einsum("nab,na,nb->", hb, X, X))
        return np.array([ds])


# ---------------------------------------------------------------------------
# Loss functionals and the generic drivers
# ---------------------------------------------------------------------------


class LossFunctional(ABC):
    """A scalar loss that is the mean of per-sample terms built from a
    Bundle.  ``order`` states the highest input derivative it consumes."""

    order: int = 2

    @abstractmethod
    def per_sample(self, bundle, X):
        """Per-sample loss terms, shape (n,).  The loss value is their mean."""

    @abstractmethod
    def adjoints(self, bundle, X):
        """(vbar, gbar, hbar): derivatives of mean(per_sample) w.r.t. the
        bundle entries.  hbar may be None when order == 1."""


def eval_with_derivatives(field, theta, x, order=2, validate=True):
    """Evaluate a field with exact input gradient and Hessian.

    ``x`` may be one point (d,) or a batch (n, d); the bundle is always
    batched.  With validate=True, non-finite outputs raise DiffEngineError
    naming the offending layer where the field supports it.
    """
    x = np.asarray(x, dtype=float)
    bundle = field.derivatives(theta, x, order=order)
    if validate:
        ok = np.isfinite(bundle.value).all() and np.isfinite(bundle.grad).all()
        if ok and bundle.hess is not None:
            ok = np.isfinite(bundle.hess).all()
        if not ok:
            if hasattr(field, "check_finite"):
                field.check_finite(theta, x)
            raise DiffEngineError("non-finite derivative bundle")
    return bundle


def param_gradient(loss, field, theta, X):
    """Value and dLoss/dtheta of ``loss`` over a batch.

    Returns (value, flat gradient).  A non-finite per-sample term raises
    DiffEngineError carrying the first offending sample index.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    bundle, tape = field.derivatives_with_tape(theta, X, order=loss.order)
    terms = loss.per_sample(bundle, X)
    if not np.isfinite(terms).all():
        bad = int(np.argwhere(~np.isfinite(terms))[0][0])
        raise DiffEngineError(f"loss is non-finite at sample {bad}", sample=bad)
    vbar, gbar, hbar = loss.adjoints(bundle, X)
    grad = field.param_backward(tape, vbar, gbar, hbar)
    return float(terms.mean()), grad


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class DiffReport:
    """Max relative errors of the propagated derivatives against central
    finite differences with step h."""

    grad_error: float
    hess_error: float
    param_error: float | None
    h: float


def max_relative_error(a, b):
    """Max-norm relative discrepancy; the scale never drops below 1e-12."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def finite_diff_check(field, theta, x, h=1e-4, loss=None, batch=None):
    """Compare propagated derivatives against central finite differences.

    Gradient and Hessian are differenced from field values at ``x`` (one
    point).  When ``loss`` and ``batch`` are given, the parameter gradient
    of the loss is differenced over every component of theta as well.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be > 0")
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    d = x.shape[0]
    eps = np.finfo(float).eps
    bundle = field.derivatives(theta, x[None, :], order=2)
    fscale = 1.0

    def val(pt):
        nonlocal fscale
        v = float(field.derivatives(theta, pt[None, :], order=1).value[0])
        fscale = max(fscale, abs(v))
        return v

    def _error(a, b, noise):
        # quantities below the stencil's roundoff resolvability count as
        # exactly reproduced; otherwise plain max-norm relative error
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        amax = np.abs(a).max(initial=0.0)
        bmax = np.abs(b).max(initial=0.0)
        diff = np.abs(a - b).max(initial=0.0)
        if max(amax, bmax, diff) <= noise:
            return 0.0
        return diff / max(amax, bmax, 1e-12)

    fd_grad = np.empty(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        fd_grad[i] = (val(x + e) - val(x - e)) / (2 * h)
    grad_error = _error(bundle.grad[0], fd_grad, 64 * eps * fscale / h)

    fd_hess = np.empty((d, d))
    f0 = val(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        fd_hess[i, i] = (val(x + ei) - 2 * f0 + val(x - ei)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            fd_hess[i, j] = fd_hess[j, i] = (
                val(x + ei + ej)
                - val(x + ei - ej)
                - val(x - ei + ej)
                + val(x - ei - ej)
            ) / (4 * h**2)
    hess_error = _error(bundle.hess[0], fd_hess, 64 * eps * fscale / h**2)

    param_error = None
    if loss is not None:
        if batch is None:
            batch = x[None, :]
        _, grad = param_gradient(loss, field, theta, batch)
        fd = np.empty_like(theta)
        lscale = 1.0
        for i in range(theta.shape[0]):
            tp = theta.copy()
            tp[i] += h
            bp = _loss_value(loss, field, tp, batch)
            tp[i] -= 2 * h
            bm = _loss_value(loss, field, tp, batch)
            fd[i] = (bp - bm) / (2 * h)
            lscale = max(lscale, abs(bp), abs(bm))
        param_error = _error(grad, fd, 64 * eps * lscale / h)

    return DiffReport(grad_error, hess_error, param_error, h)


def _loss_value(loss, field, theta, X):
    bundle = field.derivatives(theta, X, order=loss.order)
    return float(loss.per_sample(bundle, X).mean())

"""Symmetric-matrix utilities shared by the losses, densities and metrics.

All routines accept batches (n, d, d) of symmetric matrices and use fixed,
deterministic reduction orders.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NonPDHessianError",
    "chol_logdet",
    "pd_inverse",
    "det_and_adjugate",
    "sqrtm_spd",
    "inv_sqrtm_spd",
    "logsumexp",
]


class NonPDHessianError(RuntimeError):
    """A Hessian that must be positive definite is not."""

    def __init__(self, sample_index, min_eigenvalue, context=""):
        msg = (
            f"Hessian is not positive definite at sample {sample_index} "
            f"(smallest eigenvalue {min_eigenvalue:.6g})"
        )
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)
        self.sample_index = int(sample_index)
        self.min_eigenvalue = float(min_eigenvalue)


def chol_logdet(H, context=""):
    """Cholesky factors and log-determinants of a PD batch.

    Returns (L, logdet) with L (n, d, d) lower and logdet (n,).  Raises
    NonPDHessianError naming the first non-PD sample.
    """
    H = np.asarray(H, dtype=float)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        eigs = np.linalg.eigvalsh(H)
        mins = eigs[..., 0]
        bad = int(np.argmin(mins))
        raise NonPDHessianError(bad, float(mins[bad]), context) from None
    diags = np.diagonal(L, axis1=-2, axis2=-1)
    return L, 2.0 * np.log(diags).sum(axis=-1)


def pd_inverse(H, context=""):
    """Inverse of a batch of PD matrices, symmetrized; PD is verified."""
    chol_logdet(H, context)
    inv = np.linalg.inv(H)
    return 0.5 * (inv + inv.swapaxes(-1, -2))


def det_and_adjugate(H):
    """Signed determinant and adjugate of symmetric matrices.

    d(det H)/dH equals the adjugate for symmetric H, defined for singular
    and indefinite matrices alike.  Dimensions 1 and 2 use closed forms;
    higher dimensions go through an eigendecomposition with division-free
    "product of all other eigenvalues" terms.
    """
    H = np.asarray(H, dtype=float)
    d = H.shape[-1]
    if d == 1:
        det = H[..., 0, 0]
        return det, np.ones_like(H)
    if d == 2:
        a = H[..., 0, 0]
        b = H[..., 0, 1]
        c = H[..., 1, 1]
        det = a * c - b * b
        adj = np.empty_like(H)
        adj[..., 0, 0] = c
        adj[..., 1, 1] = a
        adj[..., 0, 1] = -b
        adj[..., 1, 0] = -b
        return det, adj
    w, V = np.linalg.eigh(H)
    det = np.prod(w, axis=-1)
    # prodskip[..., i] = prod_{j != i} w_j via prefix/suffix products
    ones = np.ones(w.shape[:-1] + (1,))
    prefix = np.concatenate([ones, np.cumprod(w[..., :-1], axis=-1)], axis=-1)
    suffix = np.concatenate(
        [np.cumprod(w[..., :0:-1], axis=-1)[..., ::-1], ones], axis=-1
    )
    prodskip = prefix * suffix
    adj = np.einsum("...ik,...k,...jk->...ij", V, prodskip, V)
    return det, 0.5 * (adj + adj.swapaxes(-1, -2))


def sqrtm_spd(M, floor=1e-12):
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues are floored at ``floor`` before the root so that nearly
    singular inputs stay usable.
    """
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    w = np.maximum(w, floor)
    R = (V * np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)


def inv_sqrtm_spd(M, floor=1e-12):
    """Symmetric inverse square root with the same eigenvalue floor."""
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    w = np.maximum(w, floor)
    R = (V / np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out

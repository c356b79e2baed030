"""Continuous optimal transport with convex potential networks.

Learns the convex potential whose gradient transports one density onto
another, by minimizing either a Monge-Ampere residual at collocation points
or the pullback negative log-likelihood of samples; ships the density zoo,
closed-form references, evaluation metrics, and a benchmark CLI.
"""

from .derivatives import (
    Bundle,
    DiffEngineError,
    ScalarField,
    eval_with_derivatives,
    finite_diff_check,
    param_gradient,
)
from .icnn import ICNN, init_icnn, softplus_alpha

__version__ = "0.1.0"

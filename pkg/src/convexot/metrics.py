"""Evaluation of candidate transport maps against reference problems.

The headline numbers are the unexplained variance percentage of the map
(100 |T - T*|^2_{L2(source)} / Var(target)) and the percentage error of the
estimated Wasserstein-2 distance; 2-d density and map grids are exported
as comma-separated files for external plotting.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EvalReport",
    "l2_uvp",
    "w2_percent_error",
    "GridField",
    "GridVectorField",
    "grid_density",
    "grid_map",
    "evaluate_map",
]


def l2_uvp(T, ref, n=100_000, seed=0):
    """Unexplained variance percentage of map ``T`` against ``ref.true_map``.

    Monte Carlo over ``n`` source samples; the target's total variance is
    analytic when available, otherwise estimated from ``n`` target samples
    drawn with the complementary seed.
    """
    n = int(n)
    if n < 1_000:
        raise ValueError("l2_uvp needs at least 1e3 evaluation samples")
    if ref.true_map is None:
        raise ValueError("reference has no true map")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = ref.source.sample(n, rng)
    diff = np.asarray(T(X)) - np.asarray(ref.true_map(X))
    num = float(np.einsum("ni,ni->", diff, diff)) / n
    var = ref.target.total_variance()
    if var is None:
        Y = ref.target.sample(n, rng)
        var = float(np.sum(np.var(Y, axis=0)))
    if var <= 0.0:
        raise ValueError("target variance is zero; UVP undefined")
    return 100.0 * num / var


def w2_percent_error(w2_est, w2_true):
    """100 |est - true| / true; requires a strictly positive reference."""
    if not w2_true > 0.0:
        raise ValueError(
            "true distance is zero; report the absolute estimate instead"
        )
    return 100.0 * abs(w2_est - w2_true) / w2_true


@dataclass
class EvalReport:
    """One run's evaluation against a reference, plus reproducibility data."""

    l2_uvp: float
    w2_est: float
    w2_true: float
    w2_pct_error: float
    w2sq_est: float
    w2sq_true: float
    w2sq_pct_error: float
    inverse_mse: float
    n_eval: int
    seeds: dict = field(default_factory=dict)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(self.__dict__, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def evaluate_map(u_field, ref, n=100_000, seed=0, inverse_mse=float("nan"), config=None):
    """EvalReport for the map grad(u_field) against a reference pair.

    ``u_field`` must transport ref.source onto ref.target; the W2 estimate
    integrates the squared displacement over the source density.
    """
    from .training import w2_estimate  # local import to avoid a cycle

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    uvp = l2_uvp(lambda X: u_field.bundle(X, order=1).grad, ref, n=n, seed=rng)
    w2sq_est, w2_est = w2_estimate(u_field, ref.source, n, rng)
    w2_true = ref.true_w2
    w2sq_true = ref.true_w2sq
    # a zero-distance reference has no percentage scale; report absolutes
    pct = w2_percent_error(w2_est, w2_true) if w2_true > 0 else float("nan")
    pct_sq = w2_percent_error(w2sq_est, w2sq_true) if w2sq_true > 0 else float("nan")
    return EvalReport(
        l2_uvp=uvp,
        w2_est=w2_est,
        w2_true=w2_true,
        w2_pct_error=pct,
        w2sq_est=w2sq_est,
        w2sq_true=w2sq_true,
        w2sq_pct_error=pct_sq,
        inverse_mse=float(inverse_mse),
        n_eval=int(n),
        seeds={"eval": int(seed)},
        wall_time=time.perf_counter() - t0,
        config=config or {},
    )


# ---------------------------------------------------------------------------
# 2-d grid exports
# ---------------------------------------------------------------------------


@dataclass
class GridField:
    """Scalar values on a regular 2-d grid; values[i, j] = f(xs[i], ys[j])."""

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray

    def trapezoid_integral(self):
        inner = np.trapezoid(self.values, self.ys, axis=1)
        return float(np.trapezoid(inner, self.xs))


@dataclass
class GridVectorField:
    """Map values on a regular 2-d grid; vx/vy[i, j] at (xs[i], ys[j])."""

    xs: np.ndarray
    ys: np.ndarray
    vx: np.ndarray
    vy: np.ndarray


def _grid_points(bounds, resolution):
    x0, x1, y0, y1 = (float(b) for b in bounds)
    nx, ny = (int(r) for r in (resolution if np.iterable(resolution) else (resolution, resolution)))
    if nx < 2 or ny < 2:
        raise ValueError("grid resolution must be at least 2 per axis")
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    return xs, ys, np.column_stack([XX.ravel(), YY.ravel()])


def grid_density(spec, bounds=(-4, 4, -4, 4), resolution=200):
    """exp(log density) of a 2-d density on a regular grid."""
    if spec.d != 2:
        raise ValueError("grid exports are 2-d only")
    xs, ys, pts = _grid_points(bounds, resolution)
    vals = np.exp(spec.log_density(pts)).reshape(xs.size, ys.size)
    return GridField(xs, ys, vals)


def grid_map(u_field, bounds=(-4, 4, -4, 4), resolution=200):
    """Gradient map of a 2-d potential on a regular grid."""
    if u_field.dim != 2:
        raise ValueError("grid exports are 2-d only")
    xs, ys, pts = _grid_points(bounds, resolution)
    G = u_field.bundle(pts, order=1).grad
    shape = (xs.size, ys.size)
    return GridVectorField(xs, ys, G[:, 0].reshape(shape), G[:, 1].reshape(shape))


def write_grid(path, grid):
    """Comma-separated grid with a metadata header line.

    Scalar grids get columns x,y,f; vector grids x,y,tx,ty.  Full float
    precision, so a read-back reproduces the arrays bitwise.
    """
    vec = isinstance(grid, GridVectorField)
    xs, ys = grid.xs, grid.ys
    meta = (
        f"# xmin={xs[0]!r} xmax={xs[-1]!r} ymin={ys[0]!r} ymax={ys[-1]!r} "
        f"nx={xs.size} ny={ys.size}"
    )
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    if vec:
        cols = np.column_stack(
            [XX.ravel(), YY.ravel(), grid.vx.ravel(), grid.vy.ravel()]
        )
        header = "x,y,tx,ty"
    else:
        cols = np.column_stack([XX.ravel(), YY.ravel(), grid.values.ravel()])
        header = "x,y,f"
    with open(path, "w") as fh:
        fh.write(meta + "\n" + header + "\n")
        np.savetxt(fh, cols, fmt="%.17g", delimiter=",")


def read_grid(path):
    """Read back a grid file written by :func:`write_grid`."""
    with open(path) as fh:
        meta = fh.readline()
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    kv = dict(item.split("=") for item in meta.lstrip("# ").split())
    nx, ny = int(kv["nx"]), int(kv["ny"])
    xs = data[:, 0].reshape(nx, ny)[:, 0]
    ys = data[:, 1].reshape(nx, ny)[0, :]
    if header[-1] == "f":
        return GridField(xs, ys, data[:, 2].reshape(nx, ny))
    return GridVectorField(
        xs, ys, data[:, 2].reshape(nx, ny), data[:, 3].reshape(nx, ny)
    )

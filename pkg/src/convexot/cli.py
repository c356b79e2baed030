"""Command-line entry points: solve, benchmark, estimate, sample, grid.

Exit codes: 0 success, 2 configuration error, 3 numeric failure
(divergence or a non-positive-definite Hessian), 4 I/O error.  Output
directories are only created after the configuration has parsed, so a bad
invocation leaves nothing behind.  Benchmark reports contain no wall-clock
fields; timings go to a separate file so that reruns of the same suite are
byte-identical (single-threaded; pin BLAS threads for cross-run identity).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import (
    EXPERIMENTS,
    ConfigError,
    EstimateConfig,
    SolveConfig,
    SuiteConfig,
    parse_train_config,
)
from .densities import (
    Annulus,
    Gaussian,
    NetPushforward,
    StandardGaussian,
    annulus_reference,
    density_from_dict,
    gaussian_ot_map,
    random_convex_reference,
    random_gaussian_pair,
    read_samples,
    write_samples,
)
from .derivatives import DiffEngineError
from .icnn import ICNN
from .metrics import evaluate_map, grid_density, grid_map, write_grid
from .numerics import NonPDHessianError
from .training import TrainConfig, TrainingDiverged, nll_loss, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

REPORT_SCHEMA = "convexot-benchmark-report-v1"
REPORT_COLUMNS = (
    "experiment",
    "d",
    "rep",
    "l2_uvp",
    "w2_est",
    "w2_true",
    "w2_pct_error",
    "w2sq_est",
    "w2sq_true",
    "w2sq_pct_error",
    "inverse_mse",
    "final_loss",
    "n_eval",
)


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def infer_reference(source, target):
    """Closed-form reference for recognized source/target pairs, else None."""
    gaussians = (Gaussian, StandardGaussian)
    if isinstance(source, gaussians) and isinstance(target, gaussians):
        return gaussian_ot_map(source, target)
    if isinstance(source, Annulus) and isinstance(target, StandardGaussian):
        return annulus_reference(source.d)
    return None


def _write_history(out_dir, history):
    for name, rows in history.items():
        path = out_dir / f"history_{name}.csv"
        with open(path, "w") as fh:
            fh.write("iteration,loss,wall_time\n")
            for it, loss, wall in rows:
                fh.write(f"{it},{_fmt(float(loss))},{_fmt(float(wall))}\n")


def _write_models(out_dir, pair, background):
    pair.u.save(out_dir / "u.json")
    pair.v.save(out_dir / "v.json")
    with open(out_dir / "background.json", "w") as fh:
        json.dump(background.to_dict(), fh, indent=1)


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def cmd_solve(args):
    cfg = SolveConfig.load(args.config)
    pair = train(cfg.train, source=cfg.source, target=cfg.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # the inverse map transforms background (= target) samples back to the
    # source, which is the generative direction for this model directory
    _write_models(out, pair, cfg.target)
    _write_history(out, pair.history)
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(cfg.resolved_dict(), fh, indent=1, sort_keys=True)
    ref = infer_reference(cfg.source, cfg.target)
    if ref is not None:
        report = evaluate_map(
            pair.u,
            ref,
            n=cfg.eval["n"],
            seed=cfg.eval["seed"],
            inverse_mse=pair.inverse_mse,
            config=cfg.resolved_dict(),
        )
        with open(out / "eval_report.json", "w") as fh:
            fh.write(report.to_json())
        print(
            f"solve: l2_uvp={report.l2_uvp:.4g} w2_est={report.w2_est:.6g} "
            f"w2_true={report.w2_true:.6g} inverse_mse={report.inverse_mse:.3g}"
        )
    else:
        print(f"solve: done (no closed-form reference); models in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def _cell_seeds(base_seed, experiment, d, rep):
    idx = EXPERIMENTS.index(experiment)
    words = np.random.SeedSequence((int(base_seed), idx, int(d), int(rep)))
    pair_s, data_s, train_s = (int(w) for w in words.generate_state(3))
    return pair_s, data_s, train_s


def run_benchmark_cell(payload):
    """One (experiment, dimension, repetition) benchmark run.

    Module-level so that process pools can import it; ``payload`` is a
    plain dict of primitives for the same reason.
    """
    experiment = payload["experiment"]
    d = payload["d"]
    rep = payload["rep"]
    pair_seed, data_seed, train_seed = _cell_seeds(
        payload["base_seed"], experiment, d, rep
    )
    eval_seed = int(
        np.random.SeedSequence(
            (payload["eval"]["seed"], EXPERIMENTS.index(experiment), d, rep)
        ).generate_state(1)[0]
    )
    overrides = dict(payload["train"])
    overrides["seed"] = train_seed
    t0 = time.perf_counter()

    if experiment == "random-gaussian":
        g1, g2 = random_gaussian_pair(d, pair_seed)
        ref = gaussian_ot_map(g1, g2)
        overrides["loss"] = "residual"
        cfg = parse_train_config(overrides)
        pair = train(cfg, source=g1, target=g2)
        candidate = pair.u
    elif experiment == "annulus":
        ref = annulus_reference(d)
        overrides["loss"] = "residual"
        cfg = parse_train_config(overrides)
        pair = train(cfg, source=ref.source, target=ref.target)
        candidate = pair.u
    elif experiment == "random-convex":
        gen = payload["generator"]
        ref = random_convex_reference(
            d,
            gen["widths"],
            pair_seed,
            scale=gen["scale"],
            quad=gen["quad"],
        )
        data = ref.target.sample(payload["likelihood_samples"], data_seed)
        overrides["loss"] = "likelihood"
        # the likelihood route needs a strictly convex potential
        overrides.setdefault("quad", 1e-6)
        cfg = parse_train_config(overrides)
        pair = train(cfg, samples=data, background=ref.source)
        candidate = pair.v  # forward map source -> target is the inverse net
    else:  # pragma: no cover - guarded by SuiteConfig
        raise ConfigError(f"unknown experiment {experiment!r}")

    report = evaluate_map(
        candidate,
        ref,
        n=payload["eval"]["n"],
        seed=eval_seed,
        inverse_mse=pair.inverse_mse,
        config=dataclasses.asdict(cfg.resolved(d)),
    )
    row = {
        "experiment": experiment,
        "d": d,
        "rep": rep,
        "l2_uvp": report.l2_uvp,
        "w2_est": report.w2_est,
        "w2_true": report.w2_true,
        "w2_pct_error": report.w2_pct_error,
        "w2sq_est": report.w2sq_est,
        "w2sq_true": report.w2sq_true,
        "w2sq_pct_error": report.w2sq_pct_error,
        "inverse_mse": pair.inverse_mse,
        "final_loss": float(pair.history["main"][-1][1]) if pair.history["main"] else float("nan"),
        "n_eval": payload["eval"]["n"],
    }
    report.seeds = {
        "pair": pair_seed,
        "data": data_seed,
        "train": train_seed,
        "eval": eval_seed,
    }
    return row, report, time.perf_counter() - t0


def _aggregate(rows, experiment, d):
    cells = [r for r in rows if r["experiment"] == experiment and r["d"] == d]
    numeric = [c for c in REPORT_COLUMNS if c not in ("experiment", "d", "rep")]
    out = []
    for stat in ("mean", "std"):
        agg = {"experiment": experiment, "d": d, "rep": stat}
        for col in numeric:
            vals = np.array([float(c[col]) for c in cells])
            if stat == "mean":
                agg[col] = float(vals.mean())
            else:
                agg[col] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(agg)
    return out


def cmd_benchmark(args):
    suite = SuiteConfig.load(args.config)
    if args.dims:
        dims = [int(x) for x in args.dims.split(",")]
        bad = [d for d in dims if d > 5 and not suite.allow_high_dims]
        if bad:
            raise ConfigError(
                f"--dims {bad} exceed desk scale; set allow_high_dims in the suite"
            )
        suite.dims = dims
    if args.seeds:
        suite.seeds_per_cell = int(args.seeds)

    cells = [
        {
            "experiment": e,
            "d": d,
            "rep": r,
            "base_seed": suite.base_seed,
            "train": suite.train,
            "eval": suite.eval,
            "likelihood_samples": suite.likelihood_samples,
            "generator": suite.generator,
        }
        for e in suite.experiments
        for d in suite.dims
        for r in range(suite.seeds_per_cell)
    ]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)

    results = {}
    failures = []
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futs = {pool.submit(run_benchmark_cell, c): i for i, c in enumerate(cells)}
            for fut in concurrent.futures.as_completed(futs):
                i = futs[fut]
                try:
                    results[i] = fut.result()
                except (TrainingDiverged, NonPDHessianError, DiffEngineError) as exc:
                    failures.append((cells[i], str(exc)))
    else:
        for i, c in enumerate(cells):
            try:
                results[i] = run_benchmark_cell(c)
            except (TrainingDiverged, NonPDHessianError, DiffEngineError) as exc:
                failures.append((c, str(exc)))

    rows = []
    timings = []
    for i, cell in enumerate(cells):
        if i not in results:
            continue
        row, report, wall = results[i]
        rows.append(row)
        timings.append((row["experiment"], row["d"], row["rep"], wall))
        tag = f"{row['experiment']}_d{row['d']}_r{row['rep']}"
        with open(runs_dir / f"{tag}.json", "w") as fh:
            fh.write(report.to_json())
        print(
            f"[{tag}] l2_uvp={row['l2_uvp']:.4g} "
            f"w2_pct_error={row['w2_pct_error']:.4g} "
            f"inverse_mse={row['inverse_mse']:.3g}"
        )

    config_line = json.dumps(suite.resolved_dict(), sort_keys=True)
    with open(out / "benchmark_report.csv", "w") as fh:
        fh.write(f"# schema: {REPORT_SCHEMA}\n")
        fh.write(f"# config: {config_line}\n")
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in REPORT_COLUMNS) + "\n")
        for e in suite.experiments:
            for d in suite.dims:
                if any(r["experiment"] == e and r["d"] == d for r in rows):
                    for agg in _aggregate(rows, e, d):
                        fh.write(
                            ",".join(_fmt(agg[c]) for c in REPORT_COLUMNS) + "\n"
                        )
    with open(out / "benchmark_timings.csv", "w") as fh:
        fh.write("experiment,d,rep,wall_time\n")
        for e, d, r, wall in timings:
            fh.write(f"{e},{d},{r},{wall:.3f}\n")
    if failures:
        with open(out / "benchmark_failures.txt", "w") as fh:
            for cell, msg in failures:
                fh.write(
                    f"{cell['experiment']} d={cell['d']} rep={cell['rep']}: {msg}\n"
                )
        print(f"benchmark: {len(failures)} cell(s) failed; see benchmark_failures.txt")
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate / sample / grid
# ---------------------------------------------------------------------------


def cmd_estimate(args):
    cfg = EstimateConfig.load(args.config)
    X = read_samples(args.samples)
    if X.shape[0] == 0:
        raise ConfigError(f"{args.samples}: no samples")
    d = X.shape[1]
    background = cfg.background or StandardGaussian(d)
    if background.d != d:
        raise ConfigError(
            f"samples have dimension {d} but the background has {background.d}"
        )
    pair = train(cfg.train, samples=X, background=background)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_models(out, pair, background)
    _write_history(out, pair.history)

    held_nll = float("nan")
    if pair.holdout_samples is not None and len(pair.holdout_samples):
        held_nll = nll_loss(pair.u, pair.holdout_samples, background)
    report = {
        "schema": "convexot-estimate-report-v1",
        "n_samples": int(X.shape[0]),
        "n_holdout": int(
            0 if pair.holdout_samples is None else len(pair.holdout_samples)
        ),
        "held_out_nll": held_nll,
        "inverse_mse": pair.inverse_mse,
        "final_loss": float(pair.history["main"][-1][1])
        if pair.history["main"]
        else float("nan"),
        "train": dataclasses.asdict(pair.config),
        "wall_time": pair.wall_time,
    }

    if d == 2:
        gdoc = cfg.grid or {}
        bounds = tuple(gdoc.get("bounds", (-6.0, 6.0, -6.0, 6.0)))
        res = gdoc.get("resolution", 200)
        model_density = NetPushforward("inverse", pair.u, background)
        gf = grid_density(model_density, bounds, res)
        write_grid(out / "density_grid.csv", gf)
        write_grid(out / "map_u.csv", grid_map(pair.u, bounds, res))
        write_grid(out / "map_v.csv", grid_map(pair.v, bounds, res))
        report["grid_integral"] = gf.trapezoid_integral()

    with open(out / "estimate_report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    print(
        f"estimate: held_out_nll={held_nll:.5g} inverse_mse={pair.inverse_mse:.3g}"
        + (f" grid_integral={report.get('grid_integral', float('nan')):.4f}" if d == 2 else "")
    )
    return EXIT_OK


def _load_model_dir(model_dir, need_v=True):
    mdir = Path(model_dir)
    upath, vpath, bpath = mdir / "u.json", mdir / "v.json", mdir / "background.json"
    if not upath.exists():
        raise FileNotFoundError(f"{upath}: no forward model in {mdir}")
    u = ICNN.load(upath)
    v = None
    if vpath.exists():
        v = ICNN.load(vpath)
    elif need_v:
        raise FileNotFoundError(f"{vpath}: no inverse model in {mdir}")
    if not bpath.exists():
        raise FileNotFoundError(f"{bpath}: no background density in {mdir}")
    with open(bpath) as fh:
        background = density_from_dict(json.load(fh))
    return u, v, background


def cmd_sample(args):
    u, v, background = _load_model_dir(args.model, need_v=True)
    n = int(args.n)
    if n < 0:
        raise ConfigError("--n must be >= 0")
    if n == 0:
        X = np.empty((0, v.dim))
    else:
        y = background.sample(n, int(args.seed))
        X = v.bundle(y, order=1).grad
    write_samples(args.out, X)
    print(f"sample: wrote {n} rows to {args.out}")
    return EXIT_OK


def cmd_grid(args):
    u, v, background = _load_model_dir(args.model, need_v=False)
    if u.dim != 2:
        raise ConfigError("grid exports are 2-d only")
    bounds = tuple(float(t) for t in args.bounds.split(","))
    if len(bounds) != 4:
        raise ConfigError("--bounds must be xmin,xmax,ymin,ymax")
    res = int(args.res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_density = NetPushforward("inverse", u, background)
    gf = grid_density(model_density, bounds, res)
    write_grid(out / "density_grid.csv", gf)
    write_grid(out / "map_u.csv", grid_map(u, bounds, res))
    if v is not None:
        write_grid(out / "map_v.csv", grid_map(v, bounds, res))
    print(f"grid: wrote exports to {out} (density integral {gf.trapezoid_integral():.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="convexot",
        description="Continuous optimal transport with convex potential networks",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="train forward+inverse maps between densities")
    s.add_argument("--config", required=True, help="solve config JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("benchmark", help="run an experiment suite with references")
    b.add_argument("--config", required=True, help="suite config JSON")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--dims", default=None, help="override dims, e.g. 2,3")
    b.add_argument("--seeds", default=None, help="override seeds-per-cell")
    b.add_argument("--jobs", type=int, default=1, help="parallel cell processes")
    b.set_defaults(func=cmd_benchmark)

    e = sub.add_parser("estimate", help="density estimation from a sample file")
    e.add_argument("--samples", required=True, help="CSV sample batch")
    e.add_argument("--config", required=True, help="estimate config JSON")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_estimate)

    m = sub.add_parser("sample", help="draw samples through the inverse map")
    m.add_argument("--model", required=True, help="model directory (from solve/estimate)")
    m.add_argument("--n", required=True, help="number of samples")
    m.add_argument("--seed", default=0, help="sampling seed")
    m.add_argument("--out", required=True, help="output CSV path")
    m.set_defaults(func=cmd_sample)

    g = sub.add_parser("grid", help="export 2-d density/map grids for plotting")
    g.add_argument("--model", required=True, help="model directory")
    g.add_argument("--bounds", default="-4,4,-4,4", help="xmin,xmax,ymin,ymax")
    g.add_argument("--res", default=200, help="grid resolution per axis")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_grid)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonPDHessianError, DiffEngineError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

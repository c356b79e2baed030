"""Command-line workflows: configs in, deterministic artifacts out."""

import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from convexot.cli import main
from convexot.densities import (
    Gaussian,
    GaussianMixture,
    read_samples,
    write_samples,
)
from convexot.metrics import read_grid

SINGLE_THREAD_ENV = {
    **os.environ,
    "OMP_NUM_THREADS": "1",
    "OPENBLAS_NUM_THREADS": "1",
    "MKL_NUM_THREADS": "1",
}


def run_cli(*argv):
    """In-process invocation; returns the exit code."""
    return main(list(argv))


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return str(path)


SMALL_TRAIN = {
    "seed": 9,
    "iterations": 600,
    "batch_size": 128,
    "widths": [24, 24],
    "pretrain_iterations": 600,
    "inverse_iterations": 600,
    "holdout": 512,
}


def test_solve_writes_models_history_and_report(tmp_path):
    cfg = write_json(
        tmp_path / "solve.json",
        {
            "schema": "convexot-solve-v1",
            "source": {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
            "target": {"kind": "gaussian", "mean": [2.0], "cov": [[1.0]]},
            "train": {**SMALL_TRAIN, "iterations": 1500, "inverse_iterations": 1200},
            "eval": {"n": 20000, "seed": 5},
        },
    )
    out = tmp_path / "run"
    assert run_cli("solve", "--config", cfg, "--out", str(out)) == 0
    for name in (
        "u.json",
        "v.json",
        "background.json",
        "resolved_config.json",
        "eval_report.json",
        "history_main.csv",
        "history_inverse.csv",
    ):
        assert (out / name).exists(), name
    report = json.loads((out / "eval_report.json").read_text())
    assert report["w2_true"] == pytest.approx(2.0)
    assert report["l2_uvp"] < 5.0  # small-budget smoke bound
    with open(out / "history_main.csv") as fh:
        assert fh.readline().strip() == "iteration,loss,wall_time"


def test_solve_missing_config_leaves_no_outputs(tmp_path):
    out = tmp_path / "never"
    rc = run_cli("solve", "--config", str(tmp_path / "nope.json"), "--out", str(out))
    assert rc == 4
    assert not out.exists()


def test_solve_invalid_config_is_a_config_error(tmp_path):
    cfg = write_json(tmp_path / "bad.json", {"schema": "convexot-solve-v1"})
    rc = run_cli("solve", "--config", cfg, "--out", str(tmp_path / "o"))
    assert rc == 2
    cfg2 = write_json(
        tmp_path / "bad2.json",
        {
            "schema": "convexot-solve-v1",
            "source": {"kind": "standard_gaussian", "d": 2},
            "target": {"kind": "standard_gaussian", "d": 2},
            "train": {"unknown_knob": 1},
        },
    )
    assert run_cli("solve", "--config", cfg2, "--out", str(tmp_path / "o2")) == 2
    assert not (tmp_path / "o2").exists()


SUITE_DOC = {
    "schema": "convexot-suite-v1",
    "experiments": ["random-gaussian"],
    "dims": [2],
    "seeds_per_cell": 3,
    "base_seed": 100,
    "train": {**SMALL_TRAIN, "iterations": 300, "pretrain_iterations": 300,
              "inverse_iterations": 300},
    "eval": {"n": 10000, "seed": 41},
    "likelihood_samples": 2000,
}


def test_benchmark_rows_aggregates_and_rerun_identity(tmp_path):
    cfg = write_json(tmp_path / "suite.json", SUITE_DOC)
    out1, out2 = tmp_path / "b1", tmp_path / "b2"
    env = SINGLE_THREAD_ENV
    for out in (out1, out2):
        proc = subprocess.run(
            [sys.executable, "-m", "convexot", "benchmark", "--config", cfg,
             "--out", str(out)],
            env=env,
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
    r1 = (out1 / "benchmark_report.csv").read_bytes()
    r2 = (out2 / "benchmark_report.csv").read_bytes()
    assert r1 == r2  # byte-identical rerun
    lines = r1.decode().strip().splitlines()
    data = [l for l in lines if not l.startswith("#")]
    header, *rows = data
    assert header.split(",")[0] == "experiment"
    runs = [r for r in rows if r.split(",")[2] not in ("mean", "std")]
    aggs = [r for r in rows if r.split(",")[2] in ("mean", "std")]
    assert len(runs) == 3
    assert len(aggs) == 2
    # every run row is annotated with the full resolved config
    config_line = next(l for l in lines if l.startswith("# config:"))
    resolved = json.loads(config_line.split("# config:", 1)[1])
    assert resolved["train"]["iterations"] == 300
    assert (out1 / "benchmark_timings.csv").exists()


def test_benchmark_respects_desk_dim_guard(tmp_path):
    doc = dict(SUITE_DOC, dims=[8])
    cfg = write_json(tmp_path / "suite.json", doc)
    assert run_cli("benchmark", "--config", cfg, "--out", str(tmp_path / "o")) == 2


def _mixture():
    return GaussianMixture(
        [0.5, 0.5],
        [
            Gaussian([1.0, 0.0], 0.35 * np.eye(2)),
            Gaussian([-1.0, 0.0], 0.35 * np.eye(2)),
        ],
    )


def test_estimate_sample_grid_workflow(tmp_path):
    mix = _mixture()
    data = mix.sample(4000, seed=3)
    samples = tmp_path / "data.csv"
    write_samples(samples, data)
    cfg = write_json(
        tmp_path / "est.json",
        {
            "schema": "convexot-estimate-v1",
            "train": {**SMALL_TRAIN, "iterations": 1500, "quad": 1e-6},
            "eval": {"n": 10000, "seed": 2},
            "grid": {"bounds": [-4, 4, -4, 4], "resolution": 80},
        },
    )
    out = tmp_path / "est_run"
    assert run_cli("estimate", "--samples", str(samples), "--config", cfg,
                   "--out", str(out)) == 0
    report = json.loads((out / "estimate_report.json").read_text())
    assert report["n_holdout"] == 512
    assert math.isfinite(report["held_out_nll"])
    assert report["grid_integral"] == pytest.approx(1.0, abs=0.05)
    gf = read_grid(out / "density_grid.csv")
    assert gf.values.min() >= 0.0

    # generated samples approximate the data distribution moments
    out_csv = tmp_path / "gen.csv"
    assert run_cli("sample", "--model", str(out), "--n", "20000", "--seed", "7",
                   "--out", str(out_csv)) == 0
    gen = read_samples(out_csv)
    assert gen.shape == (20000, 2)
    assert np.abs(gen.mean(axis=0) - data.mean(axis=0)).max() < 0.25

    # n = 0 writes just the header
    empty_csv = tmp_path / "empty.csv"
    assert run_cli("sample", "--model", str(out), "--n", "0", "--out",
                   str(empty_csv)) == 0
    assert read_samples(empty_csv).shape == (0, 2)

    # grid export from the model directory round-trips; leading minus needs
    # the --bounds= form so argparse does not read it as a flag
    gout = tmp_path / "grids"
    assert run_cli("grid", "--model", str(out), "--bounds=-3,3,-3,3",
                   "--res", "50", "--out", str(gout)) == 0
    gm = read_grid(gout / "map_u.csv")
    assert gm.vx.shape == (50, 50)


def test_estimate_rejects_dimension_mismatch(tmp_path):
    samples = tmp_path / "data.csv"
    write_samples(samples, np.zeros((50, 3)))
    cfg = write_json(
        tmp_path / "est.json",
        {
            "schema": "convexot-estimate-v1",
            "background": {"kind": "standard_gaussian", "d": 2},
            "train": SMALL_TRAIN,
        },
    )
    assert run_cli("estimate", "--samples", str(samples), "--config", cfg,
                   "--out", str(tmp_path / "o")) == 2


def test_estimate_rejects_empty_samples(tmp_path):
    samples = tmp_path / "data.csv"
    write_samples(samples, np.empty((0, 2)))
    cfg = write_json(
        tmp_path / "est.json",
        {"schema": "convexot-estimate-v1", "train": SMALL_TRAIN},
    )
    assert run_cli("estimate", "--samples", str(samples), "--config", cfg,
                   "--out", str(tmp_path / "o")) == 2


def test_sample_requires_inverse_model(tmp_path):
    (tmp_path / "m").mkdir()
    # a directory with no models at all is an i/o error
    rc = run_cli("sample", "--model", str(tmp_path / "m"), "--n", "10",
                 "--out", str(tmp_path / "s.csv"))
    assert rc == 4


def test_grid_requires_two_dimensional_models(tmp_path):
    cfg = write_json(
        tmp_path / "solve.json",
        {
            "schema": "convexot-solve-v1",
            "source": {"kind": "standard_gaussian", "d": 3},
            "target": {"kind": "standard_gaussian", "d": 3},
            "train": {**SMALL_TRAIN, "iterations": 50, "pretrain_iterations": 50,
                      "inverse_iterations": 50},
            "eval": {"n": 1000, "seed": 1},
        },
    )
    out = tmp_path / "run3d"
    assert run_cli("solve", "--config", cfg, "--out", str(out)) == 0
    rc = run_cli("grid", "--model", str(out), "--out", str(tmp_path / "g"))
    assert rc == 2

"""Versioned JSON configuration files for the command-line tools.

Three schemas: convexot-solve-v1 (one density-to-density run),
convexot-estimate-v1 (density estimation from a sample file), and
convexot-suite-v1 (a benchmark grid over experiments x dimensions x seeds).
Unknown keys are rejected so that typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json

from .densities import density_from_dict
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "load_json",
    "parse_train_config",
    "SolveConfig",
    "EstimateConfig",
    "SuiteConfig",
]

DESK_DIMS = (1, 2, 3, 4, 5)
EXPERIMENTS = ("random-convex", "random-gaussian", "annulus")


class ConfigError(ValueError):
    """Configuration file is malformed or inconsistent."""


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def _expect_schema(doc, schema, path):
    if doc.get("schema") != schema:
        raise ConfigError(
            f"{path}: expected schema {schema!r}, found {doc.get('schema')!r}"
        )


def parse_train_config(doc):
    """TrainConfig from a dict, rejecting unknown keys."""
    doc = dict(doc or {})
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown train option(s): {sorted(unknown)}")
    if "widths" in doc:
        doc["widths"] = tuple(doc["widths"])
    try:
        return TrainConfig(**doc).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_density(doc, path, what):
    try:
        return density_from_dict(doc)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: bad {what} density ({exc})") from exc


def _parse_eval(doc):
    doc = dict(doc or {})
    unknown = set(doc) - {"n", "seed"}
    if unknown:
        raise ConfigError(f"unknown eval option(s): {sorted(unknown)}")
    n = int(doc.get("n", 100_000))
    if n < 1_000:
        raise ConfigError("eval.n must be at least 1000")
    return {"n": n, "seed": int(doc.get("seed", 20_000_000))}


@dataclasses.dataclass
class SolveConfig:
    source: object
    target: object
    train: TrainConfig
    eval: dict

    @classmethod
    def load(cls, path):
        doc = load_json(path)
        _expect_schema(doc, "convexot-solve-v1", path)
        allowed = {"schema", "source", "target", "train", "eval"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
        if "source" not in doc or "target" not in doc:
            raise ConfigError(f"{path}: solve configs need source and target")
        source = _parse_density(doc["source"], path, "source")
        target = _parse_density(doc["target"], path, "target")
        if source.d != target.d:
            raise ConfigError(f"{path}: source and target dimensions differ")
        train = parse_train_config(doc.get("train"))
        if train.loss != "residual":
            raise ConfigError(f"{path}: solve runs train the residual loss")
        return cls(source, target, train, _parse_eval(doc.get("eval")))

    def resolved_dict(self):
        return {
            "schema": "convexot-solve-v1",
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "train": dataclasses.asdict(self.train.resolved(self.source.d)),
            "eval": self.eval,
        }


@dataclasses.dataclass
class EstimateConfig:
    background: object | None  # None: unit Gaussian of the data dimension
    train: TrainConfig
    eval: dict
    grid: dict | None

    @classmethod
    def load(cls, path):
        doc = load_json(path)
        _expect_schema(doc, "convexot-estimate-v1", path)
        allowed = {"schema", "background", "train", "eval", "grid"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
        background = (
            _parse_density(doc["background"], path, "background")
            if "background" in doc
            else None
        )
        tdoc = dict(doc.get("train") or {})
        tdoc.setdefault("loss", "likelihood")
        train = parse_train_config(tdoc)
        if train.loss != "likelihood":
            raise ConfigError(f"{path}: estimation trains the likelihood loss")
        grid = doc.get("grid")
        if grid is not None:
            unknown = set(grid) - {"bounds", "resolution"}
            if unknown:
                raise ConfigError(f"{path}: unknown grid option(s) {sorted(unknown)}")
        return cls(background, train, _parse_eval(doc.get("eval")), grid)


@dataclasses.dataclass
class SuiteConfig:
    experiments: list
    dims: list
    seeds_per_cell: int
    base_seed: int
    train: dict  # raw overrides; per-cell configs are derived
    eval: dict
    likelihood_samples: int
    generator: dict
    allow_high_dims: bool

    @classmethod
    def load(cls, path):
        doc = load_json(path)
        _expect_schema(doc, "convexot-suite-v1", path)
        allowed = {
            "schema",
            "experiments",
            "dims",
            "seeds_per_cell",
            "base_seed",
            "train",
            "eval",
            "likelihood_samples",
            "generator",
            "allow_high_dims",
        }
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
        experiments = list(doc.get("experiments", list(EXPERIMENTS)))
        for e in experiments:
            if e not in EXPERIMENTS:
                raise ConfigError(f"{path}: unknown experiment {e!r}")
        dims = [int(d) for d in doc.get("dims", [2])]
        if not dims:
            raise ConfigError(f"{path}: dims must be non-empty")
        allow_high = bool(doc.get("allow_high_dims", False))
        too_big = [d for d in dims if d not in DESK_DIMS]
        if too_big and not allow_high:
            raise ConfigError(
                f"{path}: dims {too_big} exceed the desk-scale set {DESK_DIMS}; "
                "set allow_high_dims to run them (expect long runtimes)"
            )
        seeds = int(doc.get("seeds_per_cell", 5))
        if seeds < 1:
            raise ConfigError(f"{path}: seeds_per_cell must be >= 1")
        train = dict(doc.get("train") or {})
        parse_train_config(train)  # validate the overrides eagerly
        gen = dict(doc.get("generator") or {})
        unknown = set(gen) - {"widths", "scale", "quad"}
        if unknown:
            raise ConfigError(f"{path}: unknown generator option(s) {sorted(unknown)}")
        gen.setdefault("widths", [32, 32])
        gen.setdefault("scale", 0.5)
        gen.setdefault("quad", 1.0)
        return cls(
            experiments=experiments,
            dims=dims,
            seeds_per_cell=seeds,
            base_seed=int(doc.get("base_seed", 0)),
            train=train,
            eval=_parse_eval(doc.get("eval")),
            likelihood_samples=int(doc.get("likelihood_samples", 10_000)),
            generator=gen,
            allow_high_dims=allow_high,
        )

    def resolved_dict(self):
        return {
            "schema": "convexot-suite-v1",
            "experiments": list(self.experiments),
            "dims": list(self.dims),
            "seeds_per_cell": self.seeds_per_cell,
            "base_seed": self.base_seed,
            "train": dict(self.train),
            "eval": dict(self.eval),
            "likelihood_samples": self.likelihood_samples,
            "generator": dict(self.generator),
            "allow_high_dims": self.allow_high_dims,
        }

"""Experiment configuration: YAML in, validated, resolved into model objects."""
from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
import yaml

from .environment import (
    Bernoulli,
    Constant,
    DiscreteTable,
    Gaussian,
    IIDEnvironment,
    PeriodicEnvironment,
    RWREPotential,
    SitePotential,
    StepPotential,
    StretchedPotential,
    check_class_L,
)
from .geometry import build_geometry

SCHEMA_VERSION = "1.0"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output": {"dir": ".", "prefix": "rwrp"},
    "potential": {"kind": "site", "beta": 1.0, "memory_ell": 0},
}


class ConfigError(ValueError):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("rwrp.schemas").joinpath(name).read_text())


def parse_number(v):
    """Exact ``Fraction`` for ints, decimal strings and ``"p/q"``; floats stay floats."""
    if isinstance(v, bool):
        raise ConfigError(f"not a number: {v!r}")
    if isinstance(v, int):
        return Fraction(v)
    if isinstance(v, str):
        try:
            return Fraction(v.strip())
        except ValueError as exc:
            raise ConfigError(f"not a number: {v!r}") from exc
    return float(v)


def parse_vector(v) -> tuple:
    if isinstance(v, str):
        v = [c for c in v.replace(";", ",").split(",") if c.strip()]
    if not isinstance(v, (list, tuple)):
        v = [v]
    return tuple(parse_number(c) for c in v)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = _merge(DEFAULTS, data or {})
        try:
            jsonschema.validate(data, load_schema("config.schema.json"))
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid config at {'/'.join(map(str, exc.absolute_path)) or '<root>'}: {exc.message}") from exc
        return cls(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        data = yaml.safe_load(p.read_text())
        env = (data or {}).get("environment", {})
        table = env.get("table")
        if isinstance(table, str):
            env["table"] = _read_table(p.parent / table)
        return cls.from_dict(data)

    def override(self, dotted: str, value) -> None:
        """Set ``a.b.c`` to ``value`` (command-line flags win over the file)."""
        node = self.raw
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value

    def resolved(self) -> dict:
        """The config as run, JSON-serialisable and sorted."""
        return json.loads(json.dumps(self.raw, sort_keys=True, default=str))

    @property
    def experiment(self) -> dict:
        return self.raw.get("experiment", {})

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    # ------------------------------------------------------------------
    def geometry(self):
        g = self.raw["geometry"]
        steps = [tuple(int(c) for c in s) for s in g["steps"]]
        w = g.get("weights")
        weights = None if w is None else [parse_number(c) for c in w]
        return build_geometry(int(g["dim"]), steps, weights)

    def marginal(self):
        m = self.raw["environment"].get("marginal")
        if m is None:
            return None
        kind = m["kind"]
        if kind == "gaussian":
            return Gaussian(float(m.get("mean", 0.0)), float(m.get("std", 1.0)))
        if kind == "bernoulli":
            return Bernoulli(float(m["p"]), float(m.get("low", 0.0)), float(m.get("high", 1.0)))
        if kind == "discrete":
            return DiscreteTable(tuple(float(v) for v in m["values"]), tuple(float(v) for v in m["probs"]))
        if kind == "constant":
            return Constant(float(m["c"]))
        raise ConfigError(f"unknown marginal kind {kind!r}")

    def environment(self, seed: int | None = None):
        e = self.raw["environment"]
        if e["kind"] == "periodic":
            return PeriodicEnvironment(np.asarray(e["table"], dtype=float))
        s = int(e.get("seed", self.seed)) if seed is None else int(seed)
        return IIDEnvironment(self.marginal(), seed=s)

    def potential(self, geom=None):
        p = self.raw.get("potential", {})
        kind = p.get("kind", "site")
        beta = float(p.get("beta", 1.0))
        ell = int(p.get("memory_ell", 0))
        geom = geom or self.geometry()
        if kind == "site":
            return SitePotential(beta=beta, transform=_TRANSFORMS[p.get("transform", "identity")], ell_=ell)
        if kind == "step":
            a = [float(v) for v in p["a"]]
            b = [float(v) for v in p.get("b", [0.0] * len(a))]
            return StepPotential(beta=beta, func=_AffineStep(geom.steps, tuple(a), tuple(b)))
        if kind == "stretched":
            return StretchedPotential(beta=beta, h=tuple(float(v) for v in p["h"]), psi=_TRANSFORMS[p.get("transform", "identity")])
        if kind == "rwre":
            if "q" in p:
                return RWREPotential.deterministic(geom.steps, [float(v) for v in p["q"]], beta=beta)
            return RWREPotential.from_table(geom.steps, [float(v) for v in p["values"]], [[float(c) for c in k] for k in p["kernels"]], beta=beta)
        raise ConfigError(f"unknown potential kind {kind!r}")

    def validate_model(self):
        """Geometry, environment and potential, checked against the class-L sufficient conditions."""
        geom = self.geometry()
        env = self.environment()
        pot = self.potential(geom)
        check_class_L(env, pot, geom)
        return geom, env, pot


def _read_table(path: Path) -> list:
    with open(path, newline="") as fh:
        rows = [[float(c) for c in r] for r in csv.reader(fh) if r]
    return rows[0] if len(rows) == 1 else rows


_TRANSFORMS = {"identity": None, "abs": np.abs, "square": np.square, "tanh": np.tanh}


@dataclass(frozen=True)
class _AffineStep:
    """``a_z * omega + b_z`` for the step ``z``."""

    steps: tuple
    a: tuple
    b: tuple

    def __call__(self, w, z):
        i = self.steps.index(tuple(int(c) for c in z))
        return self.a[i] * np.asarray(w) + self.b[i]

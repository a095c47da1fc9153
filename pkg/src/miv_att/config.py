"""JSON configuration: schema, defaults and conversion to run objects.

Every key is optional; omitted keys take these defaults.

``seed``: 0.
``run``: the :class:`~miv_att.estimator.RunConfig` fields ``k`` (3),
``repeats`` (7), ``alpha`` (0.05), ``variant`` ("calibrated"), ``variance``
("eif"), ``theta_form`` ("e0"), ``stratify`` (false), ``bootstrap`` (1000), plus ``clip``
(``c1`` 0.01, ``c2`` null meaning ten times max |Y|, ``tau`` 0.01), ``basis``
(``degree_grid`` [0, 1, 2, 3], ``standardize`` true, ``cv_folds`` 5) and
``learners`` with one learner block each for ``propensity``, ``instrument``
and ``outcome`` (``kind`` "glm", ``ridge`` 1e-4, ``interactions`` true,
``n_trees`` 200, ``learning_rate`` 0.1, ``max_depth`` 1, ``min_leaf`` 5,
``candidates`` [], ``cv_folds`` 5).
``estimate``: ``baselines`` (["Wald", "EIF", "2SLS"]).
``simulate``: ``dgp`` ("dgp4"), ``glim`` (GLIM block), ``sizes`` ([300]),
``replicates`` (300), ``estimators`` (["EIF-FW", "EIF", "Wald"]).
``generate``: ``dgp`` ("dgp4"), ``glim`` (GLIM block), ``n`` (1000).
A GLIM block holds ``variant`` ("multiplicative"), ``g0`` (0.4), ``g1`` (0.8),
``u_low`` (0), ``u_high`` (1), ``z_prob`` (0.5), ``outcome`` ("dgp4") and
``noise_sd`` (0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

from .estimator import RunConfig
from .fw import BasisSpec
from .learners import ClipPolicy, LearnerSpec, NuisanceSpecs
from .simulation import ESTIMATORS, GLIM_VARIANTS, GlimParams

BASELINES = ("Wald", "EIF", "2SLS")

_LEARNER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["glm", "boosted_stumps", "stack"]},
        "ridge": {"type": "number", "minimum": 0},
        "interactions": {"type": "boolean"},
        "n_trees": {"type": "integer", "minimum": 0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "max_depth": {"enum": [1, 2]},
        "min_leaf": {"type": "integer", "minimum": 1},
        "candidates": {"type": "array", "items": {"$ref": "#/$defs/learner"}},
        "cv_folds": {"type": "integer", "minimum": 2},
    },
}

_GLIM = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "variant": {"enum": list(GLIM_VARIANTS)},
        "g0": {"type": "number"},
        "g1": {"type": "number"},
        "u_low": {"type": "number"},
        "u_high": {"type": "number"},
        "z_prob": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "outcome": {"enum": ["dgp4", "none"]},
        "noise_sd": {"type": "number", "minimum": 0},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$defs": {"learner": _LEARNER, "glim": _GLIM},
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 2},
                "repeats": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                "variant": {"enum": ["calibrated", "printed"]},
                "variance": {"enum": ["eif", "printed"]},
                "theta_form": {"enum": ["e0", "eZ"]},
                "stratify": {"type": "boolean"},
                "bootstrap": {"type": "integer", "minimum": 1},
                "clip": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "c1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                        "c2": {"type": ["number", "null"], "exclusiveMinimum": 0},
                        "tau": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
                "basis": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "degree_grid": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                        "standardize": {"type": "boolean"},
                        "cv_folds": {"type": "integer", "minimum": 2},
                    },
                },
                "learners": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "propensity": {"$ref": "#/$defs/learner"},
                        "instrument": {"$ref": "#/$defs/learner"},
                        "outcome": {"$ref": "#/$defs/learner"},
                    },
                },
            },
        },
        "estimate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"baselines": {"type": "array", "items": {"enum": list(BASELINES)}, "uniqueItems": True}},
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dgp": {"enum": ["dgp4", "glim"]},
                "glim": {"$ref": "#/$defs/glim"},
                "sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "replicates": {"type": "integer", "minimum": 1},
                "estimators": {
                    "type": "array",
                    "items": {"enum": list(ESTIMATORS)},
                    "minItems": 1,
                    "uniqueItems": True,
                },
            },
        },
        "generate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dgp": {"enum": ["dgp4", "glim"]},
                "glim": {"$ref": "#/$defs/glim"},
                "n": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class ConfigError(ValueError):
    """The configuration document is malformed or violates the schema."""


@dataclass(frozen=True)
class SimulateBlock:
    dgp: str = "dgp4"
    glim: Optional[GlimParams] = None
    sizes: tuple = (300,)
    replicates: int = 300
    estimators: tuple = ("EIF-FW", "EIF", "Wald")


@dataclass(frozen=True)
class GenerateBlock:
    dgp: str = "dgp4"
    glim: Optional[GlimParams] = None
    n: int = 1000


@dataclass(frozen=True)
class AppConfig:
    seed: int = 0
    run: RunConfig = field(default_factory=RunConfig)
    baselines: tuple = BASELINES
    simulate: SimulateBlock = field(default_factory=SimulateBlock)
    generate: GenerateBlock = field(default_factory=GenerateBlock)


def _learner(doc) -> LearnerSpec:
    doc = dict(doc or {})
    if "candidates" in doc:
        doc["candidates"] = tuple(_learner(c) for c in doc["candidates"])
    return LearnerSpec(**doc)


def _glim(doc) -> Optional[GlimParams]:
    return None if doc is None else GlimParams(**doc)


def parse_config(doc: dict) -> AppConfig:
    """Validate ``doc`` against :data:`SCHEMA` and build an :class:`AppConfig`."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    seed = doc.get("seed", 0)
    r = dict(doc.get("run", {}))
    lrn = r.pop("learners", {})
    try:
        run = RunConfig(
            learners=NuisanceSpecs(**{k: _learner(v) for k, v in lrn.items()}),
            basis=BasisSpec(**{k: tuple(v) if k == "degree_grid" else v for k, v in r.pop("basis", {}).items()}),
            clip=ClipPolicy(**r.pop("clip", {})),
            seed=seed,
            **r,
        )
        sim = dict(doc.get("simulate", {}))
        sim_block = SimulateBlock(
            dgp=sim.get("dgp", "dgp4"),
            glim=_glim(sim.get("glim")),
            sizes=tuple(sim.get("sizes", (300,))),
            replicates=sim.get("replicates", 300),
            estimators=tuple(sim.get("estimators", ("EIF-FW", "EIF", "Wald"))),
        )
        gen = dict(doc.get("generate", {}))
        gen_block = GenerateBlock(gen.get("dgp", "dgp4"), _glim(gen.get("glim")), gen.get("n", 1000))
    except ValueError as exc:
        raise ConfigError(f"config error: {exc}") from None
    baselines = tuple(doc.get("estimate", {}).get("baselines", BASELINES))
    return AppConfig(seed, run, baselines, sim_block, gen_block)


def load_config(path: Optional[str]) -> AppConfig:
    if path is None:
        return AppConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)

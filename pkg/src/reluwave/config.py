"""Experiment configuration: JSON files validated against a strict schema."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .atlas import KINDS
from .pipeline import TARGETS


class ConfigError(ValueError):
    """The configuration file is missing, malformed or incomplete."""


_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "m"],
            "properties": {
                "kind": {"enum": list(KINDS)},
                "m": _POS_INT,
                "d": {"type": "integer", "minimum": 1, "maximum": 3},
                "embed_seed": {"type": "integer", "minimum": 0},
                "half_width": _POS_NUM,
                "height": _POS_NUM,
            },
        },
        "delta": _POS_NUM,
        "seed": {"type": "integer", "minimum": 0},
        "samples": _POS_INT,
        "target": {
            "type": "object",
            "additionalProperties": False,
            "required": ["id"],
            "properties": {
                "id": {"enum": list(TARGETS)},
                "center": {"type": "array", "items": {"type": "number"}},
                "sigma": _POS_NUM,
                "degree": {"type": "integer", "minimum": 1, "maximum": 3},
                "terms": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["k", "n", "coeff"],
                        "properties": {
                            "k": _INT,
                            "n": {"type": "array", "items": _INT, "minItems": 1},
                            "coeff": {"type": "number"},
                        },
                    },
                },
            },
        },
        "method": {"enum": ["truncate", "oga"]},
        "fit": {"enum": ["tangent", "manifold"]},
        "k_min": _INT,
        "k_max": _INT,
        "K": {"type": "array", "items": _INT, "minItems": 1},
        "N": {"type": "array", "items": _POS_INT, "minItems": 1},
        "chart": {"type": "integer", "minimum": 0},
        "metric": {"enum": ["l2_squared", "l2", "sup"]},
        "fit_samples": _POS_INT,
        "eval_samples": _POS_INT,
        "check_samples": _POS_INT,
        "equivalence_points": _POS_INT,
        "box": {
            "type": "object",
            "additionalProperties": False,
            "required": ["lo", "hi"],
            "properties": {"lo": {"type": "number"}, "hi": {"type": "number"}},
        },
        "thresholds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_slope": {"type": "number"},
                "strictly_decreasing": {"type": "boolean"},
                "recovery_tol": _POS_NUM,
            },
        },
        "dims": {"type": "array", "items": {"enum": [1, 2, 3]}, "minItems": 1},
        "fixture": {"type": "string"},
        "out": {"type": "string"},
    },
}

DEFAULTS = {
    "seed": 0,
    "samples": 4000,
    "method": "truncate",
    "fit": "tangent",
    "k_min": -2,
    "chart": 0,
    "fit_samples": 20000,
    "eval_samples": 4000,
    "check_samples": 1000,
    "equivalence_points": 10000,
    "dims": [1, 2, 3],
}

# keys each command cannot run without
REQUIRED = {
    "frame-selfcheck": [],
    "atlas-build": ["model", "delta"],
    "approximate": ["model", "delta", "target"],
    "compile-eval": ["model", "delta", "target"],
    "rates": ["model", "delta", "target"],
}


def validate(cfg: dict, command: str | None = None) -> dict:
    """Schema-check ``cfg`` and fill defaults; raises ConfigError."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    missing = [k for k in REQUIRED.get(command, []) if k not in cfg]
    if missing:
        raise ConfigError(f"command {command} needs config keys: {', '.join(missing)}")
    full = copy.deepcopy(DEFAULTS)
    full.update(copy.deepcopy(cfg))
    if full["method"] == "oga" and "k_max" not in full:
        raise ConfigError("method 'oga' needs k_max")
    return full


def load(path, command: str | None = None, seed: int | None = None) -> dict:
    """Read, validate and complete a config file; ``seed`` overrides the file."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    return validate(raw, command)


def config_hash(cfg: dict) -> str:
    """Short digest of the completed config, stable across key order."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]

"""JSON schemas for the files exchanged between subcommands."""

from __future__ import annotations

import jsonschema

from .config import CONFIG_SCHEMA
from .errors import ConfigError


def _vec(n, positive=False):
    item = {"type": "number", "exclusiveMinimum": 0} if positive else {"type": "number"}
    return {"type": "array", "items": item, "minItems": n, "maxItems": n}


OBB_SCHEMA = {
    "type": "object",
    "properties": {"center": _vec(3), "half_extents": _vec(3, positive=True), "rotation": _vec(4),
                   "degenerate": {"type": "boolean"}},
    "required": ["center", "half_extents", "rotation"],
    "additionalProperties": False,
}

LAYOUT_SCHEMA = {
    "type": "object",
    "properties": {
        "prompt": {"type": ["string", "null"]},
        "boxes": {"type": "array", "items": OBB_SCHEMA, "minItems": 1, "maxItems": 8},
    },
    "required": ["boxes"],
    "additionalProperties": False,
}

RECORD_SCHEMA = {
    "type": "object",
    "properties": {
        "parts": {"type": "array", "items": {"type": "string"}},
        "obbs": {"type": "array", "items": OBB_SCHEMA},
        "prompt": {"type": ["string", "null"]},
        "stats": {"type": "object"},
        "provenance": {"type": "object"},
    },
    "required": ["parts", "obbs"],
    "additionalProperties": False,
}

SCENARIO_SCHEMA = {
    "type": "object",
    "properties": {
        "field": {"enum": ["linear", "contracting", "zero", "quadratic"]},
        "parts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {"tokens": {"type": "integer", "minimum": 1},
                               "dim": {"type": "integer", "minimum": 1}},
                "required": ["tokens", "dim"],
                "additionalProperties": False,
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "sampler": CONFIG_SCHEMA["properties"]["sampler"],
        "freeze": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
    "required": ["field", "parts"],
    "additionalProperties": False,
}


def validate(data, schema, name: str = "document") -> None:
    """Raise ConfigError naming the JSON path of the first violation."""
    errors = sorted(jsonschema.Draft7Validator(schema).iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError(f"{name}: {errors[0].message}", errors[0].json_path)

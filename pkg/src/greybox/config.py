"""JSON run configurations, one schema per subcommand.

A config is a flat JSON object.  It is validated against its schema before
any work starts; unknown keys are rejected so that typos fail loudly.
"""

from __future__ import annotations

import json
import os

import jsonschema

from .errors import ValidationError

_pos_int = {"type": "integer", "minimum": 1}
_unit_num = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_shape = {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3}
_family = {"enum": ["tiny-cnn", "tiny-mlp"]}
_pretext = {"enum": ["rotation", "contrastive"]}
_mode = {"enum": ["full", "head-only"]}
_depth = {"enum": [1, 3]}
_path = {"type": "string", "minLength": 1}


def _obj(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": {"seed": {"type": "integer", "minimum": 0}, **properties},
            "required": list(required), "additionalProperties": False}


def _list_of(item: dict) -> dict:
    return {"type": "array", "items": item, "minItems": 1, "uniqueItems": True}


_optimizer = {"epochs": {"type": "integer", "minimum": 0}, "lr": {"type": "number", "exclusiveMinimum": 0},
              "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "batch_size": _pos_int}

_grid = {
    "families": _list_of(_family),
    "pretexts": _list_of(_pretext),
    "modes": _list_of(_mode),
    "depths": _list_of(_depth),
    "datasets": _list_of({"enum": ["shapes-A", "shapes-B"]}),
    "class_count": {"type": "integer", "minimum": 2, "maximum": 6},
    "n": _pos_int,
    "pool_n": _pos_int,
    "image_shape": _shape,
    "noise_std": {"type": "number", "minimum": 0},
    "pretrain_epochs": {"type": "integer", "minimum": 0},
    "finetune_epochs": {"type": "integer", "minimum": 0},
    "lr": _optimizer["lr"],
    "momentum": _optimizer["momentum"],
    "batch_size": _pos_int,
    "twin_batch_size": {"oneOf": [_pos_int, {"type": "null"}]},
    "attacks": _list_of({"enum": ["fgsm", "pgd"]}),
    "pgd_iterations": _pos_int,
    "high_budget": {"type": "boolean"},
    "targeted_modes": _list_of({"type": "boolean"}),
    "epsilon": _unit_num,
    "alpha": _unit_num,
    "square_queries": _pos_int,
    "max_test_samples": {"oneOf": [_pos_int, {"type": "null"}]},
    "jobs": _pos_int,
    "save_models": {"type": "boolean"},
    "figures": {"type": "boolean"},
}

SCHEMAS: dict[str, dict] = {
    "gen-data": _obj({
        "generator": {"enum": ["shapes-A", "shapes-B", "pretext-pool"]},
        "class_count": {"type": "integer", "minimum": 2, "maximum": 6},
        "n": _pos_int,
        "image_shape": _shape,
        "noise_std": {"type": "number", "minimum": 0},
        "format": {"enum": ["npz", "idx"]},
    }),
    "pretrain": _obj({
        "family": _family,
        "objective": _pretext,
        "pool_n": _pos_int,
        "image_shape": _shape,
        "noise_std": {"type": "number", "minimum": 0},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "projection_dim": _pos_int,
        **_optimizer,
    }),
    "finetune": _obj({
        "backbone": _path,
        "dataset": _path,
        "mode": _mode,
        "depth": _depth,
        "model_id": {"type": "string"},
        **_optimizer,
    }, required=("backbone", "dataset")),
    "attack": _obj({
        "model": _path,
        "dataset": _path,
        "backbone": _path,
        "split": {"enum": ["train", "val", "test"]},
        "family": {"enum": ["fgsm", "pgd", "backbone-pgd", "square"]},
        "epsilon": _unit_num,
        "alpha": _unit_num,
        "iterations": _pos_int,
        "query_budget": _pos_int,
        "targeted": {"type": "boolean"},
        "target_class": {"oneOf": [{"type": "integer", "minimum": 0}, {"type": "null"}]},
        "random_init": {"type": "boolean"},
        "max_samples": _pos_int,
    }, required=("model", "dataset")),
    "grid": _obj(_grid),
    "twin": _obj({k: v for k, v in _grid.items() if k not in ("attacks", "targeted_modes", "high_budget")}),
    "report": _obj({"figures": {"type": "boolean"}}),
}

DEFAULTS: dict[str, dict] = {
    "gen-data": {"generator": "shapes-A", "class_count": 4, "n": 2048, "image_shape": [1, 16, 16],
                 "noise_std": 0.05, "format": "npz", "seed": 0},
    "pretrain": {"family": "tiny-cnn", "objective": "rotation", "pool_n": 2048, "image_shape": [1, 16, 16],
                 "noise_std": 0.05, "temperature": 0.5, "projection_dim": 16, "epochs": 10, "lr": 0.05,
                 "momentum": 0.9, "batch_size": 64, "seed": 0},
    "finetune": {"mode": "full", "depth": 1, "model_id": "", "epochs": 10, "lr": 0.05, "momentum": 0.9,
                 "batch_size": 64, "seed": 0},
    "attack": {"split": "test", "family": "pgd", "epsilon": 8 / 255, "alpha": 2 / 255, "iterations": 10,
               "query_budget": 10, "targeted": False, "target_class": None, "random_init": True, "seed": 0},
    "grid": {"save_models": False, "figures": True, "seed": 0},
    "twin": {"seed": 0},
    "report": {"figures": True},
}


def validate(subcommand: str, config: dict, source: str = "config") -> dict:
    """Check ``config`` against the subcommand schema and fill in defaults."""
    if subcommand not in SCHEMAS:
        raise ValidationError(f"unknown subcommand {subcommand!r}")
    validator = jsonschema.Draft202012Validator(SCHEMAS[subcommand])
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<top level>"
        raise ValidationError(f"{source}: {where}: {err.message}")
    return {**DEFAULTS[subcommand], **config}


def load_config(subcommand: str, path=None, seed: int | None = None) -> dict:
    """Read, validate and resolve a config file; ``seed`` overrides the file's seed."""
    config = {}
    if path is not None:
        path = os.fspath(path)
        if not os.path.exists(path) or os.path.isdir(path):
            raise ValidationError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                config = json.load(fh)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise ValidationError(f"{path}: top level must be a JSON object")
    if seed is not None:
        if seed < 0:
            raise ValidationError("--seed must be non-negative")
        if subcommand == "report":
            raise ValidationError("report takes no --seed")
        config = {**config, "seed": seed}
    return validate(subcommand, config, source=path or "config")

"""Experiment configuration: JSON schema, defaults, overrides and dataset construction."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema

from .datagen import (
    FederatedDataset,
    gen_concept_shift_regression,
    gen_label_skew_classification,
    gen_quadratic_clients,
    gen_sine_clients,
    load_csv_partition,
)
from .engine import SAMPLING_SCHEMES, SCHEMA_VERSION, WEIGHTINGS, FederationConfig
from .errors import ConfigError
from .models import FAMILIES, ModelSpec

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}

DATASET_SCHEMAS = {
    "quadratic": {
        "properties": {
            "kind": {"const": "quadratic"},
            "curvatures": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
            "optima": {"type": "array", "items": _num, "minItems": 1},
            "n_per_client": _pos_int,
        },
        "required": ["kind", "curvatures", "optima"],
    },
    "sine": {
        "properties": {
            "kind": {"const": "sine"},
            "N": _pos_int,
            "n_per_client": _pos_int,
            "n_test": _nonneg_int,
            "noise_sd": {"type": "number", "minimum": 0},
            "phase_sampling": {"enum": ["stratified", "iid"]},
            "hidden_dims": {"type": "array", "items": _pos_int},
        },
        "required": ["kind", "N"],
    },
    "label_skew": {
        "properties": {
            "kind": {"const": "label_skew"},
            "N": _pos_int,
            "classes": {"type": "integer", "minimum": 2},
            "dirichlet_alpha": {"type": "number", "exclusiveMinimum": 0},
            "n_total": _pos_int,
            "n_test_per_client": _nonneg_int,
            "input_dim": _pos_int,
            "class_sep": _num,
            "groups": _pos_int,
        },
        "required": ["kind", "N", "classes", "dirichlet_alpha"],
    },
    "concept_shift": {
        "properties": {
            "kind": {"const": "concept_shift"},
            "N": _pos_int,
            "cluster_count": _pos_int,
            "input_dim": _pos_int,
            "n_per_client": _pos_int,
            "n_test": _nonneg_int,
            "noise_sd": {"type": "number", "minimum": 0},
        },
        "required": ["kind", "N", "cluster_count"],
    },
    "csv": {
        "properties": {
            "kind": {"const": "csv"},
            "path": {"type": "string"},
            "partition_column": {"type": "string"},
            "target_column": {"type": "string"},
            "group_column": {"type": "string"},
            "task": {"enum": ["regression", "classification"]},
            "test_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        },
        "required": ["kind", "path", "partition_column"],
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fedsim experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "strategy"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": sorted(DATASET_SCHEMAS)}},
            "allOf": [
                {"if": {"properties": {"kind": {"const": k}}},
                 "then": {**v, "additionalProperties": False}}
                for k, v in sorted(DATASET_SCHEMAS.items())
            ],
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "family": {"enum": list(FAMILIES)},
                "hidden_dims": {"type": "array", "items": _pos_int},
            },
        },
        "strategy": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
        },
        "engine": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": _pos_int,
                "local_epochs": {"oneOf": [_pos_int, {"type": "array", "items": _pos_int, "minItems": 1}]},
                "batch_size": {"oneOf": [_pos_int, {"const": "full"}]},
                "lr_local": {"type": "number", "exclusiveMinimum": 0},
                "lr_server": {"type": "number", "minimum": 0},
                "sample_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "sampling_scheme": {"enum": list(SAMPLING_SCHEMES)},
                "sampling_gamma": _num,
                "weighting": {"enum": list(WEIGHTINGS)},
                "target_loss": {"type": ["number", "null"]},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "curves": {"type": "boolean"},
                "include_timing": {"type": "boolean"},
            },
        },
    },
}

ENGINE_DEFAULTS = {
    "rounds": 100,
    "local_epochs": 1,
    "batch_size": "full",
    "lr_local": 0.1,
    "lr_server": 1.0,
    "sample_fraction": 1.0,
    "sampling_scheme": "uniform",
    "sampling_gamma": 1.0,
    "weighting": "auto",
    "target_loss": None,
}
OUTPUT_DEFAULTS = {"dir": "fedsim_out", "curves": True, "include_timing": False}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``to_dict``/``from_dict`` round-trip exactly."""

    dataset: dict
    strategy: dict
    engine: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validate_config(raw)
        raw = copy.deepcopy(raw)
        strategy = {"name": raw["strategy"]["name"], "params": raw["strategy"].get("params", {})}
        return cls(
            dataset=raw["dataset"],
            strategy=strategy,
            engine={**ENGINE_DEFAULTS, **raw.get("engine", {})},
            model=raw.get("model", {}),
            output={**OUTPUT_DEFAULTS, **raw.get("output", {})},
            seed=raw.get("seed", 0),
        )

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "dataset": copy.deepcopy(self.dataset),
            "strategy": copy.deepcopy(self.strategy),
            "engine": copy.deepcopy(self.engine),
            "output": copy.deepcopy(self.output),
        }
        if self.model:
            d["model"] = copy.deepcopy(self.model)
        return d

    def federation_config(self, workers: int = 1) -> FederationConfig:
        e = self.engine
        epochs = e["local_epochs"]
        try:
            return FederationConfig(
                rounds=e["rounds"],
                local_epochs=tuple(epochs) if isinstance(epochs, list) else epochs,
                batch_size=e["batch_size"],
                lr_local=float(e["lr_local"]),
                lr_server=float(e["lr_server"]),
                sample_fraction=float(e["sample_fraction"]),
                sampling_scheme=e["sampling_scheme"],
                sampling_gamma=float(e["sampling_gamma"]),
                weighting=e["weighting"],
                strategy=self.strategy["name"],
                strategy_params=dict(self.strategy["params"]),
                seed=self.seed,
                workers=workers,
                target_loss=e["target_loss"],
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"engine: {exc}") from exc

    def with_overrides(self, overrides: list[str] | None = None, seed: int | None = None) -> "ExperimentConfig":
        raw = self.to_dict()
        for item in overrides or []:
            apply_override(raw, item)
        if seed is not None:
            raw["seed"] = seed
        return ExperimentConfig.from_dict(raw)


def _path(error) -> str:
    parts = [str(p) for p in error.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate_config(raw) -> None:
    """Raise :class:`ConfigError` naming the offending field path."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(list(e.absolute_path)), _path(e)))
    if errors:
        worst = max(errors, key=lambda e: len(list(e.absolute_path)))
        raise ConfigError(f"{_path(worst)}: {worst.message}")


def parse_value(text: str):
    """JSON if it parses (numbers, true, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, item: str) -> None:
    """Apply ``a.b.c=value`` in place, creating intermediate objects."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {item!r} has an empty key")
    node = raw
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {item!r}: {p} is not an object")
        node = nxt
    node[parts[-1]] = parse_value(value)


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config. IO problems raise ``OSError``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


def build_dataset(cfg: ExperimentConfig, base_dir=None) -> FederatedDataset:
    d = {k: v for k, v in cfg.dataset.items() if k != "kind"}
    kind = cfg.dataset["kind"]
    seed = cfg.seed
    if kind == "quadratic":
        ds = gen_quadratic_clients(d["curvatures"], d["optima"], d.get("n_per_client", 1))
    elif kind == "sine":
        ds = gen_sine_clients(seed=seed, **d)
    elif kind == "label_skew":
        ds = gen_label_skew_classification(seed=seed, **d)
    elif kind == "concept_shift":
        ds = gen_concept_shift_regression(seed=seed, **d)
    else:
        path = Path(d.pop("path"))
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        ds = load_csv_partition(path, seed=seed, **d)
    if cfg.model:
        m = cfg.model
        spec = ModelSpec(
            m.get("family", ds.spec.family),
            ds.spec.input_dim,
            ds.spec.output_dim,
            tuple(m.get("hidden_dims", ())),
            loss_kind=ds.spec.loss_kind,
            bias=ds.spec.bias,
        )
        ds = replace(ds, spec=spec)
    return ds

"""JSON run configuration: schema, defaults, and ``--set key=value`` overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema

from .model import ModelConfig
from .optim import MODES, SCHEDULES, TrainConfig

_nonneg_int = {"type": "integer", "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["eta", "T", "task"],
    "properties": {
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "T": _nonneg_int,
        "mode": {"enum": list(MODES)},
        "beta": {"type": "number", "minimum": 0},
        "K": _nonneg_int,
        "lambda": {"type": "number", "minimum": 0},
        "r": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "minimum": 0},
        "seed": _nonneg_int,
        "warmup_steps": _nonneg_int,
        "schedule": {"enum": list(SCHEDULES)},
        "batch_size": {"type": "integer", "minimum": 1},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "lowrank_dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "delta_alpha_scale": {"type": "boolean"},
        "eval_every": _nonneg_int,
        "out_dir": {"type": "string"},
        "modes": {"type": "array", "items": {"enum": list(MODES)}, "minItems": 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "d_ff": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "seq_len": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["teacher_student", "char_lm"]},
                "seed": _nonneg_int,
                "n_train": {"type": "integer", "minimum": 1},
                "n_eval": {"type": "integer", "minimum": 1},
                "noise_std": {"type": "number", "minimum": 0},
                "perturb_rank": _nonneg_int,
                "perturb_scale": {"type": "number", "minimum": 0},
                "dense_scale": {"type": "number", "minimum": 0},
                "corpus_path": {"type": "string"},
                "seq_len": {"type": "integer", "minimum": 1},
                "split": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
            "if": {"properties": {"kind": {"const": "char_lm"}}},
            "then": {"required": ["corpus_path"]},
        },
    },
}

_MODEL_KEYS = ("d_model", "heads", "d_ff", "layers", "seq_len", "dropout")
_TASK_KEYS = {
    "teacher_student": {"kind", "seed", "n_train", "n_eval", "noise_std", "perturb_rank",
                        "perturb_scale", "dense_scale"},
    "char_lm": {"kind", "seed", "corpus_path", "seq_len", "split"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig
    model: ModelConfig
    task: dict
    out_dir: str
    modes: list[str]

    def echo(self) -> dict:
        """Fully resolved configuration, as written into every run output."""
        d = self.train.to_dict()
        d["model"] = {k: getattr(self.model, k) for k in _MODEL_KEYS}
        d["task"] = copy.deepcopy(self.task)
        d["out_dir"] = self.out_dir
        d["modes"] = list(self.modes)
        return d


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` strings; dotted keys reach into nested objects."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(value)
    return out


def from_dict(raw: dict) -> RunConfig:
    validate(raw)
    task = raw["task"]
    stray = sorted(set(task) - _TASK_KEYS[task["kind"]])
    if stray:
        raise ConfigError(f"invalid config:\n  task: keys {stray} do not apply to kind {task['kind']!r}")
    train_keys = {f.name for f in fields(TrainConfig)} - {"lam"} | {"lambda"}
    train = {k: v for k, v in raw.items() if k in train_keys}
    try:
        tcfg = TrainConfig.from_dict(train)
        mcfg = ModelConfig(**raw.get("model", {}))
        if mcfg.d_model % mcfg.heads:
            raise ValueError(f"d_model {mcfg.d_model} is not divisible by heads {mcfg.heads}")
        if tcfg.r > mcfg.d_model:
            raise ValueError(f"rank r={tcfg.r} exceeds d_model={mcfg.d_model}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return RunConfig(
        train=tcfg,
        model=mcfg,
        task=dict(raw["task"]),
        out_dir=raw.get("out_dir", "runs"),
        modes=list(raw.get("modes", [tcfg.mode])),
    )


def load_config(path, overrides=()) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(apply_overrides(raw, overrides))

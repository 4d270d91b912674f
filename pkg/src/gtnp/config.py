"""Experiment configuration: JSON schema, defaults and the config hash."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .baselines import VARIANTS
from .data import ShiftDescriptor, SynthConfig
from .losses import MmdConfig
from .model import Dimensions
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}
_OPT = {"type": "string", "enum": ["adam", "rmsprop", "Adam", "RMSprop"]}

SYNTH_SCHEMA = _obj(
    {
        "class_count": {"type": "integer", "minimum": 2},
        "shape": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
        "samples_per_class": _POS_INT,
        "noise_std": _NONNEG,
        "shift": _obj({"rotation_deg": _NUM, "scale": _NUM, "offset": _NUM, "noise_std": _NONNEG}),
        "emerging_class": {"type": "boolean"},
        "angle_step_deg": _NUM,
        "radius": {"type": "number", "exclusiveMinimum": 0},
    }
)

SCHEMA = _obj(
    {
        "seed": _NONNEG_INT,
        "output_dir": {"type": "string"},
        "data": {
            "oneOf": [
                _obj({"synth": SYNTH_SCHEMA}, required=["synth"]),
                _obj({"source": {"type": "string"}, "target": {"type": "string"}}, required=["source", "target"]),
            ]
        },
        "model": _obj({"d_f": _POS_INT, "d_g": _POS_INT, "d_u": _POS_INT, "d_z": _POS_INT}),
        "train": _obj(
            {
                "batch_size": {"type": "integer", "minimum": 2},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "optimizer": _OPT,
                "epochs": _NONNEG_INT,
                "n_ref": _POS_INT,
                "n_ref_source": _POS_INT,
                "target_train_size": _POS_INT,
                "source_train_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "gcn_epochs": _NONNEG_INT,
                "gcn_lr": {"type": "number", "exclusiveMinimum": 0},
                "gcn_optimizer": _OPT,
                "gcn_nodes": _POS_INT,
                "use_target_labels": {"type": "boolean"},
                "emerging": {"type": "boolean"},
            }
        ),
        "losses": _obj(
            {
                "lambda_mmd": _NONNEG,
                "amp": _NONNEG,
                "mmd_bandwidth": {"type": "string", "enum": ["median", "fixed"]},
                "mmd_sigma": {"type": "number", "exclusiveMinimum": 0},
            }
        ),
        "uncertainty": _obj({"n_draws": _POS_INT, "select": {"type": "array", "items": _NONNEG_INT}}),
        "baselines": {"type": "array", "items": {"type": "string", "enum": list(VARIANTS)}, "uniqueItems": True},
    },
    required=["data"],
)

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "model": {},
    "train": {},
    "losses": {},
    "uncertainty": {"n_draws": 100, "select": []},
    "baselines": list(VARIANTS),
}


def validate(doc: dict) -> dict:
    """Schema-check ``doc`` and fill top-level defaults; unknown keys are rejected."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    out = copy.deepcopy(DEFAULTS)
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **copy.deepcopy(value)}
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path, seed: int | None = None, out: str | None = None) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        doc["seed"] = int(seed)
    if out is not None:
        doc["output_dir"] = str(out)
    return validate(doc)


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON of everything except the output location."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


def synth_config(cfg: dict) -> SynthConfig:
    block = dict(cfg["data"]["synth"])
    if "shift" in block:
        block["shift"] = ShiftDescriptor(**block["shift"])
    return SynthConfig(seed=cfg["seed"], **block)


def train_config(cfg: dict) -> TrainConfig:
    losses = cfg["losses"]
    mmd = MmdConfig(bandwidth=losses.get("mmd_bandwidth", "median"), sigma=losses.get("mmd_sigma", 1.0))
    train = dict(cfg["train"])
    for key in ("optimizer", "gcn_optimizer"):
        if key in train:
            train[key] = train[key].lower()
    return TrainConfig(
        seed=cfg["seed"],
        dims=Dimensions(**cfg["model"]),
        lambda_mmd=losses.get("lambda_mmd", 1.0),
        amp=losses.get("amp", 0.1),
        mmd=mmd,
        **train,
    )

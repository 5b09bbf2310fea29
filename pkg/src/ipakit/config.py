"""Run configuration: a JSON document validated against a closed schema.

User documents only need the sections they change; everything else is
filled from the packaged ``configs/default.json``. Unknown keys are
rejected at every level. A ``model`` section, when given, must spell out
the whole architecture because the host's identity depends on all of it.
"""

import copy
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .nanomodel.config import TARGET_SETS, ModelConfig, TaskSpec
from .trainer import TrainConfig

VARIANTS = ("lora", "dora", "ipa")
AXES = ("hidden_dim", "pretrain_fraction", "algorithm")

_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_MODEL = _obj(
    {"vocab": _POS, "d_model": _POS, "n_layers": _POS, "n_heads": _POS, "d_ff": _POS,
     "seq_len": _POS, "n_classes": _POS, "target_set": {"enum": sorted(TARGET_SETS)},
     "seed": _SEED},
    required=("vocab", "d_model", "n_layers", "n_heads", "d_ff", "seq_len", "n_classes",
              "target_set", "seed"),
)
_TASK = _obj(
    {"task_id": {"type": "string"}, "seed": _SEED, "intrinsic_dim": _POS,
     "spectrum": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
     "n_train": _POS, "n_eval": {"type": "integer", "minimum": 0}, "teacher_hidden": _POS}
)
_PER_VARIANT = _obj({v: {"type": "number", "exclusiveMinimum": 0} for v in VARIANTS})

SCHEMA = _obj({
    "model": _MODEL,
    "host_train": _obj({"steps": _POS, "batch_size": _POS, "base_lr": _NUM,
                        "warmup_steps": _INT, "seed": _SEED}),
    "task": _TASK,
    "tasks": {"type": "array", "items": _TASK, "minItems": 1},
    "adapter": _obj({"variant": {"enum": list(VARIANTS)}, "rank": _POS,
                     "scale": {"type": ["number", "null"]}, "proj_ft": {"type": ["boolean", "null"]},
                     "seed": _SEED}),
    "projector": _obj({"algorithm": {"enum": ["exact", "ipca", "gha", "random"]},
                       "centered": {"type": "boolean"},
                       "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                       "batch_size": _POS, "epochs": _POS, "lr": _NUM,
                       "complete_basis": {"type": "boolean"}, "seed": _SEED}),
    "train": _obj({"steps": _POS, "batch_size": _POS, "base_lr": {"type": ["number", "null"]},
                   "warmup_steps": _INT, "beta1": _NUM, "beta2": _NUM, "eps": _NUM,
                   "seed": _SEED}),
    "defaults": _obj({"scale": _PER_VARIANT, "base_lr": _PER_VARIANT}),
    "analysis": _obj({"seeds": {"type": "array", "items": _SEED, "minItems": 1},
                      "n_tasks": _POS, "axis": {"enum": list(AXES)},
                      "settings": {"type": "array", "minItems": 1},
                      "control_rank": {"type": ["integer", "null"], "minimum": 1},
                      "full_ft": {"type": "boolean"}, "full_ft_lr": _NUM,
                      "cell_lr": {"type": "object", "additionalProperties": False,
                                  "patternProperties": {
                                      "^(lora|dora|ipa)/(frozen|trainable)/[0-9]+$":
                                          {"type": "number", "exclusiveMinimum": 0}}}}),
    "output": {"type": "string"},
})


class ConfigError(ValueError):
    """The run configuration does not satisfy the schema."""


@lru_cache(maxsize=None)
def _packaged(name):
    return resources.files("ipakit").joinpath("configs", name).read_text(encoding="utf-8")


def packaged_config(name="default.json"):
    """A config document shipped with the package (a fresh copy)."""
    return json.loads(_packaged(name))


def validate(doc):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return doc


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(doc=None):
    """Validate ``doc`` and merge it over the defaults.

    ``doc`` may be a dict, a JSON file path, ``"pkg:<name>"`` for a config
    shipped in ``ipakit/configs``, or None for the defaults alone.
    """
    if doc is None:
        doc = {}
    elif isinstance(doc, str) and doc.startswith("pkg:"):
        doc = packaged_config(doc[len("pkg:"):])
    elif isinstance(doc, (str, Path)):
        try:
            doc = json.loads(Path(doc).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate(doc)
    merged = _merge(packaged_config(), doc)
    validate(merged)
    return merged


def model_config(cfg):
    return ModelConfig(**cfg["model"])


def host_train_config(cfg):
    return TrainConfig(**cfg["host_train"])


def task_spec(cfg, which=None):
    """The ``task`` section, or entry ``which`` of ``tasks`` (merged over ``task``)."""
    if which is None:
        return TaskSpec(**cfg["task"])
    return TaskSpec(**{**cfg["task"], **cfg["tasks"][which]})


def scale_for(cfg, variant):
    given = cfg["adapter"]["scale"]
    return float(given) if given is not None else float(cfg["defaults"]["scale"][variant])


def train_config(cfg, variant, **overrides):
    """TrainConfig with the per-variant base learning rate unless one is set."""
    t = {**cfg["train"], **overrides}
    if t.get("base_lr") is None:
        t["base_lr"] = cfg["defaults"]["base_lr"][variant]
    return TrainConfig(**t)

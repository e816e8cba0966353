"""Run configuration: JSON files validated against an exhaustive schema.

Physics fields (``t_min``, ``t_max``, ``d``, ``n_bins``) and the data source
have no defaults. Everything else falls back to ``defaults.json`` shipped with
the package.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .denoiser import DenoiserConfig
from .sampler import SamplerConfig
from .training import TrainConfig

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_POS_INT = {"type": "integer", "minimum": 1}
_PROB_VEC = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_DATA = {
    "oneOf": [
        _obj({"source": {"const": "markov"}, "transition": {"type": "array", "items": _PROB_VEC, "minItems": 1},
              "initial": _PROB_VEC}, ["source", "transition"]),
        _obj({"source": {"const": "iid"}, "probs": _PROB_VEC}, ["source", "probs"]),
        _obj({"source": {"const": "corpus"}, "path": {"type": "string"},
              "tokenizer": {"enum": ["char", "whitespace"]}}, ["source", "path", "tokenizer"]),
    ]
}

SCHEMA = _obj(
    {
        "_comment": {"type": "string"},
        "t_min": _POS,
        "t_max": _POS,
        "d": _POS_INT,
        "n_bins": _POS_INT,
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "data": _DATA,
        "model": _obj({
            "blocks": _POS_INT, "width": _POS_INT, "heads": _POS_INT, "fourier_features": _POS_INT,
            "time_mlp_width": _POS_INT, "mlp_ratio": _POS_INT, "embedding_init_scale": _POS,
        }),
        "train": _obj({
            "batch": _POS_INT, "seq_len": _POS_INT, "lr": _POS, "beta1": _UNIT, "beta2": _UNIT,
            "cond_dropout": _UNIT, "self_cond_fraction": _UNIT, "steps": {"type": "integer", "minimum": 0},
            "grad_clip": {"oneOf": [_POS, {"type": "null"}]}, "checkpoint_every": _POS_INT,
            "mask": _obj({"kind": {"enum": ["prefix_fixed", "prefix_random", "fully_random", "mixed"]},
                          "prefix_len": {"type": "integer", "minimum": 0}, "prefix_fraction": _UNIT}),
            "time_warping": {"type": "boolean"},
            "warp_shape": {"oneOf": [{"type": "null"},
                                     {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2}]},
            "warp_temperature": _POS, "warp_uniformity": _UNIT,
            "lr_schedule": {"enum": ["constant", "cosine"]},
        }),
        "warp": _obj({"min_bin": _POS, "ema_decay": {"oneOf": [{"type": "null"},
                                                               {"type": "number", "minimum": 0, "exclusiveMaximum": 1}]}}),
        "sampler": _obj({
            "solver": {"enum": ["euler", "heun"]}, "n_steps": _POS_INT,
            "spacing": {"enum": ["warped", "rho", "warped_rho"]}, "rho": _POS,
            "sigma_init": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "score_temp": _POS, "softmax_temp": _POS,
            "nucleus_p": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "guidance": _NUM, "mode": {"enum": ["plain", "renormalise", "clamp", "renormalise+clamp"]},
            "decode": {"enum": ["argmax", "nearest_embedding"]}, "self_condition": {"type": "boolean"},
            "truncate_self_cond": {"type": "boolean"}, "warp_temperature": _POS, "warp_uniformity": _UNIT,
        }),
        "eval": _obj({"n_samples": _POS_INT}),
    },
    required=["t_min", "t_max", "d", "n_bins", "data"],
)


class ConfigError(ValueError):
    pass


def load_defaults() -> dict:
    text = resources.files("cdcd").joinpath("defaults.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "data":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(raw: dict) -> dict:
    """Validate a user config and fill non-physics defaults.

    The result contains every field explicitly, so it can be stored in a
    checkpoint and restored without consulting the defaults again.
    """
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {path}: {exc.message}") from None
    cfg = _merge(load_defaults(), raw)
    cfg.pop("_comment", None)
    jsonschema.validate(cfg, SCHEMA)
    if not cfg["t_max"] > cfg["t_min"]:
        raise ConfigError("t_max must exceed t_min")
    data = cfg["data"]
    if data["source"] == "markov":
        v = len(data["transition"])
        if any(len(row) != v for row in data["transition"]):
            raise ConfigError("transition matrix must be square")
        if "initial" in data and len(data["initial"]) != v:
            raise ConfigError("initial distribution length must match the transition matrix")
    try:
        # constructing the typed configs runs their own cross-field checks
        denoiser_config(cfg, vocab=2)
        train_config(cfg)
        sampler_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(raw)


def denoiser_config(cfg: dict, vocab: int) -> DenoiserConfig:
    m = cfg["model"]
    return DenoiserConfig(
        vocab=vocab, d=cfg["d"], blocks=m["blocks"], width=m["width"], heads=m["heads"],
        fourier_features=m["fourier_features"], time_mlp_width=m["time_mlp_width"], mlp_ratio=m["mlp_ratio"],
    )


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "checkpoint_every"}
    return TrainConfig(seed=cfg["seed"], **t)


def sampler_config(cfg: dict, **overrides) -> SamplerConfig:
    s = dict(cfg["sampler"])
    s.update({k: v for k, v in overrides.items() if v is not None})
    return SamplerConfig(**s)

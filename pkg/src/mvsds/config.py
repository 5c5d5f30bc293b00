"""Flat dotted-key run configuration shared by every CLI command.

A config file is a JSON object whose keys are dotted names such as
``train.lr`` or ``distill.field.levels``.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import fields, is_dataclass
from pathlib import Path

from .distill import DistillConfig
from .mvnet import DenoiserConfig
from .radiance import FieldConfig
from .trainer import DreamBoothConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _flatten(prefix: str, obj) -> dict:
    out = {}
    for f in fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if is_dataclass(val):
            out.update(_flatten(key, val))
        else:
            out[key] = _listify(val)
    return out


def _listify(val):
    return [_listify(v) for v in val] if isinstance(val, (tuple, list)) else val


def _schema() -> dict:
    s = {
        "seed": 0,
        "schedule.num_steps": 1000,
        "schedule.family": "linear_beta",
        "schedule.beta_start": 1e-4,
        "schedule.beta_end": 0.02,
        "data.scenes": 64,
        "data.passes": 2,
        "data.resolution": 32,
        "train.checkpoint_every": 500,
        "sample.n_views": 4,
        "sample.ddim_steps": 50,
        "sample.cfg_scale": 5.0,
        "sample.rescale_phi": 0.0,
        "eval.batches": 16,
    }
    s.update(_flatten("model", DenoiserConfig()))
    s.update(_flatten("train", TrainConfig()))
    del s["train.seed"]
    s.update(_flatten("distill", DistillConfig()))
    del s["distill.seed"]
    s.update(_flatten("dreambooth", DreamBoothConfig()))
    return s


SCHEMA = _schema()


def describe_schema() -> str:
    width = max(map(len, SCHEMA))
    return "\n".join(f"  {k.ljust(width)}  {json.dumps(v)}" for k, v in SCHEMA.items())


def parse_value(text: str):
    """CLI override values are JSON where possible and bare strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check_type(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return type(default)(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key} expects a list, got {value!r}")
    return value


class RunConfig:
    """Resolved key/value configuration: schema defaults, then file, then overrides."""

    def __init__(self, values: dict | None = None):
        self.values = dict(SCHEMA)
        if values:
            self.update(values)

    def update(self, values: dict) -> None:
        unknown = sorted(set(values) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self.values[k] = _check_type(k, v, SCHEMA[k])

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        rc = cls()
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
            if not isinstance(doc, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
            rc.update(doc)
        if overrides:
            rc.update(overrides)
        return rc

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir) -> Path:
        from .tensorio import atomic_write_text

        path = Path(out_dir) / "config.json"
        atomic_write_text(path, self.to_json())
        return path

    def _build(self, cls, prefix: str, **extra):
        try:
            return cls(**self.section(prefix), **extra)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid {prefix} settings: {e}") from None

    def denoiser_config(self) -> DenoiserConfig:
        return self._build(DenoiserConfig, "model")

    def train_config(self) -> TrainConfig:
        sec = self.section("train")
        sec.pop("checkpoint_every")
        try:
            return TrainConfig(**sec, seed=self["seed"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid train settings: {e}") from None

    def dreambooth_config(self) -> DreamBoothConfig:
        return self._build(DreamBoothConfig, "dreambooth")

    def distill_config(self) -> DistillConfig:
        sec = self.section("distill")
        field_sec = {k[len("field."):]: sec.pop(k) for k in list(sec) if k.startswith("field.")}
        try:
            sec["resolution_schedule"] = tuple(tuple(x) for x in sec["resolution_schedule"])
            for k in ("pos_words", "neg_words", "snapshot_fractions"):
                sec[k] = tuple(sec[k])
            return DistillConfig(**sec, field=FieldConfig(**field_sec), seed=self["seed"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid distill settings: {e}") from None

    def schedule(self):
        from .sched import build_schedule

        s = self.section("schedule")
        try:
            return build_schedule(s["num_steps"], s["family"], s["beta_start"], s["beta_end"])
        except ValueError as e:
            raise ConfigError(f"invalid schedule settings: {e}") from None

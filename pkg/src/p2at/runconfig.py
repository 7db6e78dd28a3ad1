"""``key = value`` run files covering model, training and path settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .engine import TrainConfig
from .errors import ConfigError
from .model import PRESETS, ModelConfig, parse_field

PATH_KEYS = ("data", "holdout", "out")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def parse_run_config(text, source="<config>"):
    """Parse run-file text. Unknown or repeated keys are errors; absent keys keep defaults.

    ``size_preset`` seeds the model fields from the named preset before the
    explicit keys are applied, whatever line it appears on.
    """
    model_keys, train_keys = _field_names(ModelConfig), _field_names(TrainConfig)
    overlap = model_keys & train_keys
    assert not overlap, overlap
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in model_keys and key not in train_keys and key not in PATH_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: key {key!r} already set on line {seen[key][0]}")
        seen[key] = (lineno, raw)

    def convert(cls, key):
        lineno, raw = seen[key]
        try:
            return parse_field(cls, key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {raw!r}") from exc

    model_vals = {k: convert(ModelConfig, k) for k in seen if k in model_keys}
    preset = model_vals.get("size_preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"{source}: unknown size_preset {preset!r}")
        model_vals = {**PRESETS[preset], **model_vals}
    train_vals = {k: convert(TrainConfig, k) for k in seen if k in train_keys}
    cfg = RunConfig(ModelConfig(**model_vals), TrainConfig(**train_vals), {k: seen[k][1] for k in PATH_KEYS if k in seen})
    cfg.train.validate()
    return cfg


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read(), source=str(path))


def format_run_config(cfg):
    lines = ["# model"]
    lines += cfg.model.echo().splitlines()
    lines.append("# training")
    for f in dataclasses.fields(cfg.train):
        lines.append(f"{f.name} = {getattr(cfg.train, f.name)}")
    if cfg.paths:
        lines.append("# paths")
        lines += [f"{k} = {v}" for k, v in cfg.paths.items()]
    return "\n".join(lines) + "\n"

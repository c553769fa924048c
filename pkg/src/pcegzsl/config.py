"""Plain-text ``key = value`` config files.

One file carries the training hyperparameters, the loss weights and the
synthetic-data spec. ``#`` starts a comment; unknown keys are errors; absent
keys keep their defaults.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .data import SyntheticSpec
from .losses import ContrastiveVariant, LossWeights
from .pipeline import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "weights"}
_WEIGHT_KEYS = {f.name: f.type for f in dataclasses.fields(LossWeights)}
_DATA_KEYS = {f.name: f.type for f in dataclasses.fields(SyntheticSpec) if f.name != "seed"}
KNOWN_KEYS = {**_TRAIN_KEYS, **_WEIGHT_KEYS, **_DATA_KEYS}


def _convert(key: str, raw: str, lineno: int | None):
    kind = KNOWN_KEYS[key]
    try:
        if key == "variant":
            return ContrastiveVariant(raw.lower())
        if kind in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}", lineno) from None


def parse_config(text: str) -> dict:
    values, where = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key or not raw:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", lineno)
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[key] = _convert(key, raw, lineno)
        where[key] = lineno
    values["_lines"] = where
    return values


def build(values: dict) -> tuple[TrainConfig, SyntheticSpec]:
    where = values.get("_lines", {})
    train = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    weights = {k: v for k, v in values.items() if k in _WEIGHT_KEYS}
    data = {k: v for k, v in values.items() if k in _DATA_KEYS}
    try:
        cfg = TrainConfig(weights=LossWeights(**weights), **train)
        spec = SyntheticSpec(seed=cfg.seed, **data)
    except ValueError as exc:
        # point at the line of the offending key when the message names one
        line = next((where[k] for k in where if k in str(exc)), None)
        raise ConfigError(str(exc), line) from None
    return cfg, spec


def load_config(path=None) -> tuple[TrainConfig, SyntheticSpec]:
    if path is None:
        return build({})
    return build(parse_config(Path(path).read_text()))


def format_config(cfg: TrainConfig, spec: SyntheticSpec | None = None) -> str:
    lines = ["# training"]
    for key in _TRAIN_KEYS:
        val = getattr(cfg, key)
        lines.append(f"{key} = {val.value}" if isinstance(val, ContrastiveVariant) else f"{key} = {val!r}")
    lines.append("# loss weights")
    lines += [f"{key} = {getattr(cfg.weights, key)!r}" for key in _WEIGHT_KEYS]
    if spec is not None:
        lines.append("# synthetic data")
        lines += [f"{key} = {getattr(spec, key)!r}" for key in _DATA_KEYS]
    return "\n".join(lines) + "\n"

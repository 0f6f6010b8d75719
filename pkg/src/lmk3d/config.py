"""Flat ``key = value`` run configuration.

Bare keys set :class:`ModelConfig` fields, ``aug.``-prefixed keys set
:class:`AugmentConfig` fields and the keys in :class:`RunConfig` control how
the training set is built. Tuples are comma separated. ``#`` starts a comment.
Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .augment import AugmentConfig
from .errors import InvalidConfig
from .model import ModelConfig

AUG_PREFIX = "aug."


@dataclass
class RunConfig:
    augment: bool = True
    augment_copies: int = 1  # augmented copies added per original sample
    augment_seed: int = 1
    val_count: int = 0  # trailing pairs held out for validation


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    run: RunConfig = field(default_factory=RunConfig)


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return tuple(type(d)(p) for d, p in zip(default, parts))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise InvalidConfig(f"bad value for {key!r}: {raw!r} ({e})") from None


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


def parse_config(text: str) -> TrainConfig:
    model_d, aug_d, run_d = _defaults(ModelConfig), _defaults(AugmentConfig), _defaults(RunConfig)
    model_kw, aug_kw, run_kw = {}, {}, {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith(AUG_PREFIX) and key[len(AUG_PREFIX):] in aug_d:
            name = key[len(AUG_PREFIX):]
            aug_kw[name] = _convert(key, raw, aug_d[name])
        elif key in run_d:
            run_kw[key] = _convert(key, raw, run_d[key])
        elif key in model_d:
            model_kw[key] = _convert(key, raw, model_d[key])
        else:
            raise InvalidConfig(f"line {n}: unknown key {key!r}")
    try:
        aug = replace(AugmentConfig(), **aug_kw)
    except ValueError as e:
        raise InvalidConfig(str(e)) from None
    return TrainConfig(ModelConfig.from_dict(model_kw), aug, replace(RunConfig(), **run_kw))


def read_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def format_config(cfg: TrainConfig) -> str:
    """Inverse of :func:`parse_config` (every key written explicitly)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(repr(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    lines = [f"{f.name} = {fmt(getattr(cfg.model, f.name))}" for f in fields(ModelConfig)]
    lines += [f"{AUG_PREFIX}{f.name} = {fmt(getattr(cfg.augment, f.name))}" for f in fields(AugmentConfig)]
    lines += [f"{f.name} = {fmt(getattr(cfg.run, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"

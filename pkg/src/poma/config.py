"""Flat ``key = value`` configuration files shared by every CLI verb."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .encoder import EncoderConfig
from .errors import ConfigError
from .trainer import TrainConfig

STAGE_DEFAULTS = {"warmup": {"steps": 500, "batch_size": 32}, "main": {"steps": 1000, "batch_size": 4}}

_EXTRA: dict[str, type] = {
    "manifest": str,
    "init": str,
    "scenes": int,
    "views_per_scene": int,
    "n_cameras": int,
    "coverage_cell": float,
    "text_seed": int,
    "encoder": str,
    "query_mode": str,
    "gradcheck_eps": float,
    "gradcheck_samples": int,
}

EXTRA_DEFAULTS: dict[str, Any] = {
    "encoder": "target",
    "query_mode": "concat",
    "text_seed": 0,
    "gradcheck_eps": 1e-4,
    "gradcheck_samples": 6,
}


def _types() -> dict[str, type]:
    out: dict[str, type] = {}
    for dc in (TrainConfig, EncoderConfig):
        for f in fields(dc):
            out[f.name] = {"int": int, "float": float, "str": str}[f.type] \
                if isinstance(f.type, str) else f.type
    out.update(_EXTRA)
    return out


KEY_TYPES = _types()


def _coerce(key: str, raw: Any) -> Any:
    typ = KEY_TYPES[key]
    if isinstance(raw, typ) and not isinstance(raw, bool):
        return raw
    try:
        if typ is int:
            return int(str(raw), 0)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: Optional[str]) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text, str(p))


def merge(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in KEY_TYPES:
            raise ConfigError(f"unknown key {k!r}")
        out[k] = _coerce(k, v)
    return out


def encoder_config(values: Mapping[str, Any], **defaults) -> EncoderConfig:
    names = {f.name for f in fields(EncoderConfig)}
    kw = {**defaults, **{k: v for k, v in values.items() if k in names}}
    return EncoderConfig(**kw)


def train_config(values: Mapping[str, Any]) -> TrainConfig:
    stage = values.get("stage", "main")
    if stage not in STAGE_DEFAULTS:
        raise ConfigError(f"stage must be warmup or main, got {stage!r}")
    names = {f.name for f in fields(TrainConfig)}
    kw = {**STAGE_DEFAULTS[stage], **{k: v for k, v in values.items() if k in names}}
    if "warmup_steps" not in values:
        from .pipeline import auto_warmup
        kw["warmup_steps"] = auto_warmup(kw["steps"])
    cfg = TrainConfig(**kw)
    cfg.validate()
    return cfg


def extra(values: Mapping[str, Any], key: str):
    return values.get(key, EXTRA_DEFAULTS.get(key))

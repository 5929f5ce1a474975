"""Run configuration files: JSON documents mirroring ``RunConfig``.

Precedence is flags over file over defaults. Every problem is reported with
the dotted key path that caused it.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from pathlib import Path

from .data import ConfigurationError
from .envs import PointMassConfig
from .pipeline import RunConfig


class UnknownKeyError(ConfigurationError):
    pass


class ConfigTypeError(ConfigurationError):
    pass


class ConfigValueError(ConfigurationError):
    pass


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)
_ENV_FIELDS = {f.name for f in dataclasses.fields(PointMassConfig)} - {"version"}


def _check_type(path: str, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigTypeError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigTypeError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigTypeError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigTypeError(f"{path}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigTypeError(f"{path}: expected a list, got {value!r}")
        return tuple(_check_type(f"{path}[{i}]", v, args[0]) for i, v in enumerate(value))
    if origin is dict or hint is dict:
        if not isinstance(value, dict):
            raise ConfigTypeError(f"{path}: expected an object, got {value!r}")
        return value
    raise ConfigTypeError(f"{path}: unsupported type {hint}")


def _check_env_overrides(path: str, overrides: dict) -> dict:
    out = {}
    hints = typing.get_type_hints(PointMassConfig)
    for k, v in overrides.items():
        if k not in _ENV_FIELDS:
            raise UnknownKeyError(f"{path}.{k}: unknown environment constant")
        hint = hints[k]
        if typing.get_origin(hint) is tuple:
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigTypeError(f"{path}.{k}: expected a pair of numbers")
            out[k] = tuple(_check_type(f"{path}.{k}[{i}]", x, float) for i, x in enumerate(v))
        else:
            out[k] = _check_type(f"{path}.{k}", v, hint)
    return out


def validate_mapping(raw: dict, path: str = "config") -> dict:
    """Type-check a partial config mapping; returns normalized values."""
    if not isinstance(raw, dict):
        raise ConfigTypeError(f"{path}: expected an object at the top level")
    out = {}
    for k, v in raw.items():
        if k not in _FIELDS:
            raise UnknownKeyError(f"{path}.{k}: unknown key")
        if k == "env_overrides":
            out[k] = _check_env_overrides(f"{path}.{k}", _check_type(f"{path}.{k}", v, dict))
        else:
            out[k] = _check_type(f"{path}.{k}", v, _HINTS[k])
    return out


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"{p}: config file not found")
    text = p.read_text()
    if not text.strip():
        return {}
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: not valid JSON ({exc})") from None
    return validate_mapping(raw)


def parse_config(path=None, flags: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then non-None ``flags``."""
    values = load_config_file(path) if path is not None else {}
    if flags:
        values.update(validate_mapping({k: v for k, v in flags.items() if v is not None}, "flags"))
    try:
        return RunConfig(**values)
    except ConfigurationError as exc:
        raise ConfigValueError(f"config.{exc}") from None


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

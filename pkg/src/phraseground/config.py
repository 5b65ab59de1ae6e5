"""Run configuration: JSON config files, dotted-key overrides, and helpers
for building typed configs from dict sections.

Precedence is CLI override > config file > dataclass default.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .errors import ConfigError

SECTIONS = ("train", "model", "paths", "eval", "synth")


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"{path}: unknown config section {key!r} (expected {SECTIONS})")
    return raw


def apply_overrides(config: dict, overrides) -> dict:
    """Apply "section.key=value" strings; values parse as JSON, else string."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        keys = dotted.split(".")
        if len(keys) < 2 or keys[0] not in SECTIONS:
            raise ConfigError(f"override key {dotted!r} must start with a section in {SECTIONS}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-object")
        node[keys[-1]] = value
    return config


def dataclass_from_dict(cls, section: dict, where: str):
    """Build a dataclass from a config section, rejecting unknown keys."""
    section = dict(section or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; expected a subset of {sorted(known)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def write_json(path, payload, indent: int = 2) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=indent) + "\n")

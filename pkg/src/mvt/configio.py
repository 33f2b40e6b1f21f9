"""Strict JSON plumbing shared by configs, manifests, and reports.

Unknown keys are rejected everywhere a schema is decoded, and all output is
emitted with sorted keys and no timestamps so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import json
import os

from .errors import ConfigError, DataFormatError


def check_keys(d: dict, required: set[str], optional: set[str], context: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{context}: expected an object, got {type(d).__name__}")
    unknown = set(d) - required - optional
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{context}: missing keys {sorted(missing)}")


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def dump_jsonl_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_json(obj))


def load_json(path: str):
    if not os.path.isfile(path):
        raise DataFormatError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None

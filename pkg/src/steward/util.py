"""Small shared helpers: size units, stable JSON, key=value config files."""

from __future__ import annotations

import json
from typing import Any

# Decimal (SI) unit suffixes. Storage volumes throughout the codebase are
# plain byte counts; suffixed literals are a convenience for humans.
_UNIT_FACTORS = {
    "k": 10**3,
    "M": 10**6,
    "G": 10**9,
    "T": 10**12,
    "P": 10**15,
}

TB = _UNIT_FACTORS["T"]
GB = _UNIT_FACTORS["G"]

DAY = 86400.0
HOUR = 3600.0


def parse_size(text: str) -> float:
    """Parse a numeric literal with an optional k/M/G/T/P suffix (SI decimal)."""
    text = text.strip()
    if text and text[-1] in _UNIT_FACTORS:
        return float(text[:-1]) * _UNIT_FACTORS[text[-1]]
    return float(text)


def format_size(num_bytes: float) -> str:
    """Human-oriented rendering of a byte count, SI decimal."""
    value = float(num_bytes)
    for suffix in ("", "k", "M", "G", "T"):
        if abs(value) < 1000.0:
            return f"{value:.4g}{suffix}"
        value /= 1000.0
    return f"{value:.4g}P"


def stable_json(obj: Any) -> str:
    """Deterministic compact JSON: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class ConfigError(ValueError):
    """Raised for malformed key=value configuration text."""


def parse_kv_config(text: str) -> dict[str, dict[str, str]]:
    """Parse sectioned key=value configuration text.

    Lines are ``key = value``; ``[section]`` opens a section (keys before any
    section land in section ``""``); ``#`` starts a comment. Values are kept
    as raw strings; callers coerce types.
    """
    sections: dict[str, dict[str, str]] = {"": {}}
    current = sections[""]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        current[key.strip()] = value.strip()
    return sections


def coerce_scalar(text: str) -> Any:
    """Best-effort string -> bool/int/float, falling back to the string."""
    low = text.lower()
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text

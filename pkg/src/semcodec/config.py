"""Flat key-value run configuration with strict key checking.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Precedence: command-line flags override file values override defaults.
Unknown file keys fail fast. The resolved mapping can be echoed back out as
a file that replays the command exactly.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"key {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"key {key}: expected an integer, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"key {key}: expected a number, got {raw!r}") from e
    return raw


def resolve(defaults: dict, file_values: dict | None, flag_values: dict | None) -> dict:
    """Merge defaults <- file <- flags; reject keys outside the schema."""
    resolved = dict(defaults)
    if file_values:
        for key, raw in file_values.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key: {key!r}")
            resolved[key] = _coerce(key, raw, defaults[key])
    if flag_values:
        for key, val in flag_values.items():
            if val is None:
                continue
            if key not in defaults:
                raise ConfigError(f"unknown flag key: {key!r}")
            resolved[key] = val
    return resolved


def echo_config(resolved: dict, path) -> None:
    """Write the resolved configuration back out as a loadable config file."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    p.write_text("\n".join(lines) + "\n")

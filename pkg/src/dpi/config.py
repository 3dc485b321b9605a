"""Plain key=value run configuration files.

Lines are ``key = value`` with ``#`` comments; keys must belong to the
schema the command declares, so typos fail fast instead of silently using
defaults.  Command-line flags override file values.  Every command writes
the fully resolved configuration next to its outputs as a reproducibility
manifest in the same format.
"""

from __future__ import annotations

from pathlib import Path

from .errors import DataError, ParameterError


def parse_config_file(path, schema: dict) -> dict:
    """Read key=value pairs, coercing each through schema[key] (a callable)."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {p}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{p}:{lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in schema:
            raise ParameterError(f"{p}:{lineno}: unknown key {key!r}")
        try:
            values[key] = schema[key](val)
        except (TypeError, ValueError) as exc:
            raise ParameterError(f"{p}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def write_manifest(path, values: dict) -> None:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_bool(val: str) -> bool:
    low = str(val).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {val!r}")

"""Flat ``key = value`` run configuration."""

from __future__ import annotations


class UsageError(ValueError):
    """Bad command line or configuration."""


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Lines of ``key = value``; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: empty key")
        if key in out:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read(), str(path))
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from err


def format_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())

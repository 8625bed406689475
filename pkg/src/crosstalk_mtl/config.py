"""Flat ``key = value`` configuration text.

Blank lines and lines starting with ``#`` are ignored.  Values stay strings;
typed accessors live on the consumers.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

from .errors import ConfigError


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def load_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def format_kv(values: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def config_hash(values: Mapping[str, object], length: int = 12) -> str:
    """Order-independent digest of a resolved configuration."""
    canon = "".join(f"{k}={values[k]}\n" for k in sorted(values))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:length]


def split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]

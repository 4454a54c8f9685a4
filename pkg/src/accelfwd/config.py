"""Flat ``key = value`` configuration files."""
from __future__ import annotations

from pathlib import Path


def read_kv(path) -> dict[str, str]:
    """Parse one ``key = value`` pair per line; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip().lower()] = value.strip()
    return out


def write_kv(path, values: dict) -> Path:
    path = Path(path)
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path

"""Flat ``key = value`` configuration text shared by the CLI and checkpoints."""
from __future__ import annotations

from typing import Dict, Mapping


def parse_kv(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def format_kv(values: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def parse_ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")

"""Machine-readable sidecar files: one ``key=value`` line per reported number.

Floats are rendered with ``repr`` so parsing a sidecar recovers the exact
in-memory value, and identical runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_sidecar(items: Mapping[str, Any]) -> str:
    lines = [f"{key}={format_value(value)}" for key, value in items.items()]
    return "\n".join(lines) + "\n"


def write_sidecar(path: str | Path, items: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_sidecar(items))
    return path


def parse_sidecar(path: str | Path) -> dict[str, str]:
    result: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        result[key] = value
    return result

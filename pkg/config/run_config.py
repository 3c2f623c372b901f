"""Flat ``key = value`` run-config files."""

from pathlib import Path
from typing import Any

from core.errors import ArgumentError


def parse_value(raw: str) -> Any:
    """Parse a config value as bool, int, float, comma list or string."""
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null", ""):
        return None
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_run_config(path: str | Path) -> dict[str, Any]:
    """Read a run-config file. Keys are normalised to ``snake_case``."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ArgumentError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip().lstrip("-").replace("-", "_")
        if not key:
            raise ArgumentError(f"{path}:{lineno}: empty key")
        values[key] = parse_value(raw)
    return values


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def dump_run_config(values: dict[str, Any], path: str | Path) -> None:
    """Write ``values`` as a run-config file, keys sorted."""
    lines = [f"{key} = {format_value(values[key])}" for key in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

"""Flat key=value run configuration with per-command schemas."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Bad configuration; the CLI maps it to the usage exit code."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(x) for x in text.split(",") if x.strip()) if text else ()


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""
    choices: tuple = ()


BOOL, INT, FLOAT, STR, INTS = _bool, int, float, str, _int_tuple


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; '#' starts a comment; later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_text(text, str(path))


def resolve(schema: dict[str, Key], *layers: dict[str, str]) -> dict[str, Any]:
    """Merge raw layers (later wins) over schema defaults, rejecting unknown keys."""
    raw: dict[str, str] = {}
    for layer in layers:
        unknown = sorted(set(layer) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}; valid keys: {', '.join(sorted(schema))}")
        raw.update(layer)
    values = {}
    for name, key in schema.items():
        if name not in raw:
            values[name] = key.default
            continue
        try:
            values[name] = key.parse(raw[name])
        except ValueError as err:
            raise ConfigError(f"bad value for {name}: {raw[name]!r} ({err})") from None
        if key.choices and values[name] not in key.choices:
            raise ConfigError(f"invalid {name} {values[name]!r}; valid values: {', '.join(map(str, key.choices))}")
    return values


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return ""
    return str(v)


def dump(values: dict[str, Any], header: dict[str, Any] | None = None) -> str:
    """Resolved config text; deliberately free of timestamps so reruns compare equal."""
    lines = [f"format_version={FORMAT_VERSION}"]
    for k, v in (header or {}).items():
        lines.append(f"{k}={format_value(v)}")
    lines += [f"{k}={format_value(values[k])}" for k in sorted(values)]
    return "\n".join(lines) + "\n"


def parse_overrides(args: list[str]) -> dict[str, str]:
    """``--key=value`` or ``--key value`` pairs; dashes in keys become underscores."""
    out = {}
    i = 0
    while i < len(args):
        a = args[i]
        if not a.startswith("--") or len(a) == 2:
            raise ConfigError(f"unexpected argument {a!r}; overrides look like --key=value")
        body = a[2:]
        if "=" in body:
            k, v = body.split("=", 1)
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for {a}")
            k, v = body, args[i + 1]
            i += 1
        out[k.replace("-", "_")] = v
        i += 1
    return out

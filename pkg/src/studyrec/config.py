"""Plain-text key-value configs with ``[section]`` headers, mapped onto dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
import typing
from pathlib import Path
from typing import Any, Mapping


class ConfigFileError(Exception):
    pass


def _coerce(raw: str, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if annotation is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    if annotation is str:
        return raw.strip()
    if origin is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        elem = args[0] if args else str
        return tuple(_coerce(p, elem) for p in parts)
    if origin is typing.Union or str(origin) == "types.UnionType":
        if raw.strip().lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0])
    return raw


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value).lower() if isinstance(value, bool) else str(value)


def from_mapping(cls, mapping: Mapping[str, str], base=None):
    """Build dataclass ``cls`` from string values, starting from ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigFileError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    values = {}
    for key, raw in mapping.items():
        try:
            values[key] = _coerce(raw, hints[key])
        except ValueError as exc:
            raise ConfigFileError(f"{cls.__name__}.{key}: {exc}") from None
    if base is None:
        return cls(**values)
    return dataclasses.replace(base, **values)


def to_mapping(obj) -> dict[str, str]:
    return {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def read_sections(path: str | os.PathLike) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    return {name: dict(parser[name]) for name in parser.sections()}


def dump_sections(sections: Mapping[str, Mapping[str, str]]) -> str:
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def write_sections(path: str | os.PathLike, sections: Mapping[str, Mapping[str, str]]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dump_sections(sections), encoding="utf-8")
    os.replace(tmp, path)


def digest(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return hashlib.sha256(text).hexdigest()

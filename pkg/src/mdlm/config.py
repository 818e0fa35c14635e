"""INI-style run configuration with typed coercion and layered precedence.

Precedence is defaults < config file < command-line flags.  Sections mirror
module names (``[model]``, ``[lora]``, ``[train]``, ``[generate]``, ``[eval]``
...).  A dotted section such as ``[train.sft1]`` overlays ``[train]``.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

PRESETS = ("long", "short")


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return Path(str(resources.files("mdlm") / "presets" / f"{name}.ini"))


def read_ini(path: str | Path | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    return {name: dict(parser[name]) for name in parser.sections()}


def section(raw: Mapping[str, Mapping[str, str]], name: str, overlay: str | None = None) -> dict[str, str]:
    out = dict(raw.get(name, {}))
    if overlay:
        out.update(raw.get(f"{name}.{overlay}", {}))
    return out


def _coerce(value: str, annotation) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, getattr(types, "UnionType", ())):
        if value.strip().lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0])
    if origin is tuple or annotation is tuple:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if annotation is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if annotation is int:
        return int(float(value)) if "e" in value.lower() else int(value)
    if annotation is float:
        return float(value)
    return value.strip()


def build(cls, *layers: Mapping[str, Any]):
    """Instantiate dataclass ``cls`` from layered string/typed mappings.

    Later layers win; unknown keys raise so typos in config files surface.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    values: dict[str, Any] = {}
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            if key not in fields:
                raise KeyError(f"unknown {cls.__name__} key {key!r}")
            values[key] = _coerce(value, hints[key]) if isinstance(value, str) else value
    return cls(**values)


def dataclass_snapshot(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return dataclasses.asdict(obj)

"""Key-value config files.

Files use INI syntax: an optional ``[section]`` header followed by
``key = value`` lines.  Sections map onto the components (``data``, ``env``,
``airline``, ``train``, ``chance``); keys outside any section land in
``default``.  Values stay strings here; each component coerces its own keys.
"""

import configparser
from pathlib import Path

from .errors import ConfigError


def read_config(path):
    """Return ``{section: {key: raw_string}}`` for an INI-style file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(default_section="__none__", interpolation=None,
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[default]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {name: dict(parser.items(name)) for name in parser.sections()}


def write_config(sections, path):
    lines = []
    for name, items in sections.items():
        if not items:
            continue
        lines.append(f"[{name}]")
        for key, value in items.items():
            lines.append(f"{key} = {format_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def coerce(raw, like, key="value"):
    """Convert string ``raw`` to the type of the default value ``like``."""
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if isinstance(like, bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(like, int):
            return int(s)
        if isinstance(like, float):
            return float(s)
        if isinstance(like, tuple):
            inner = like[0] if like else 0.0
            return tuple(coerce(p, inner, key) for p in s.split(",") if p.strip())
        if like is None:
            if s.lower() == "none":
                return None
            try:
                return float(s)
            except ValueError:
                return s
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return s


def apply_overrides(obj, items, section=""):
    """Set dataclass fields of ``obj`` from a string mapping; unknown keys raise."""
    import dataclasses

    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in names:
            where = f"[{section}] " if section else ""
            raise ConfigError(f"unknown config key {where}{key!r}")
        updates[key] = coerce(raw, getattr(obj, key), key)
    return dataclasses.replace(obj, **updates)

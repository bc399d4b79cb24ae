"""Line-oriented ``section.key = value`` config files.

Values are JSON literals; a bare word that is not valid JSON is read as a
string. Lines starting with ``#`` are comments.
"""

import hashlib
import json
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from .api_models import RunConfig
from .errors import ConfigError


def _flatten(prefix: str, value: Any, out: dict[str, Any]) -> None:
    if isinstance(value, dict):
        for key, item in value.items():
            _flatten(f"{prefix}.{key}" if prefix else key, item, out)
    else:
        out[prefix] = value


def flatten(config: RunConfig) -> dict[str, Any]:
    """Dotted keys to JSON-compatible leaf values."""
    out: dict[str, Any] = {}
    _flatten("", config.model_dump(mode="json"), out)
    return out


def serialize(config: RunConfig) -> str:
    return "".join(f"{key} = {json.dumps(value)}\n" for key, value in flatten(config).items())


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _nest(pairs: dict[str, Any]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for key, value in pairs.items():
        node = tree
        *sections, leaf = key.split(".")
        for section in sections:
            child = node.setdefault(section, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{key} nests under a plain value", {"key": key})
            node = child
        if isinstance(node.get(leaf), dict):
            raise ConfigError(f"{key} is a section, not a value", {"key": key})
        node[leaf] = value
    return tree


def validate(pairs: dict[str, Any]) -> RunConfig:
    """Build a :class:`RunConfig` from dotted pairs; every failure is a ConfigError."""
    try:
        return RunConfig.model_validate(_nest(pairs))
    except ValidationError as e:
        keys = [".".join(str(part) for part in error["loc"]) for error in e.errors()]
        first = e.errors()[0]["msg"] if e.errors() else str(e)
        raise ConfigError(f"invalid config at {', '.join(keys) or '<root>'}: {first}", {"keys": keys}) from e


def parse(text: str) -> RunConfig:
    """Parse config text; omitted keys keep their defaults."""
    pairs: dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {number} is not 'key = value': {stripped!r}", {"line": number})
        if key in pairs:
            raise ConfigError(f"duplicate key {key} on line {number}", {"key": key, "line": number})
        pairs[key] = _parse_value(raw.strip())
    return validate(pairs)


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file, or return the defaults when ``path`` is None."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}", {"path": str(path)}) from e
    return parse(text)


def with_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Copy of ``config`` with dotted keys replaced, revalidated."""
    pairs = flatten(config)
    unknown = [key for key in overrides if key not in pairs]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", {"keys": unknown})
    pairs.update(overrides)
    return validate(pairs)


def config_hash(config: RunConfig) -> str:
    """First 12 hex digits of the SHA-256 of the serialized config."""
    return hashlib.sha256(serialize(config).encode("utf-8")).hexdigest()[:12]

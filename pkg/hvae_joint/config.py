"""Key=value configuration files mapped onto the config dataclasses.

Config files are parsed with python-dotenv. Keys are dataclass field names;
fields that are themselves dataclasses are addressed with a ``<field>_``
prefix, so ``hmc_steps=3`` sets ``TrainConfig.hmc.steps``.
"""

import dataclasses
import hashlib
import logging
import typing
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from dotenv import dotenv_values

from hvae_joint.errors import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar('T')

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def load_config_file(path) -> Dict[str, str]:
    """
    Read a line-oriented key=value config file.

    Args:
        path: Path to the file

    Returns:
        Dict of raw string values in file order
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    values = dotenv_values(path)
    empty = [key for key, value in values.items() if value is None]
    if empty:
        raise ConfigError(f"Config keys without a value in {path}: {', '.join(empty)}")
    logger.info(f"Loaded {len(values)} config keys from {path}")
    return dict(values)


def render_value(value: Any) -> str:
    """Render one field value the way it is written in a config file."""
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(render_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_mapping(config: Any, prefix: str = '') -> Dict[str, str]:
    """Flatten a (nested) config dataclass into key=value strings."""
    mapping: Dict[str, str] = {}
    for field in dataclasses.fields(config):
        value = getattr(config, field.name)
        if dataclasses.is_dataclass(value):
            mapping.update(to_mapping(value, prefix=f"{prefix}{field.name}_"))
        else:
            mapping[f"{prefix}{field.name}"] = render_value(value)
    return mapping


def fingerprint(config: Any) -> str:
    """Stable SHA-256 hex digest of a config's canonical key=value rendering."""
    lines = [f"{key}={value}" for key, value in sorted(to_mapping(config).items())]
    return hashlib.sha256('\n'.join(lines).encode('utf-8')).hexdigest()


def coerce(raw: str, hint: Any, key: str = '?') -> Any:
    """
    Convert a raw string into the type named by a dataclass field hint.

    Args:
        raw: String value from a file, the environment or the CLI
        hint: Resolved type hint of the field
        key: Field name, for error messages

    Returns:
        The converted value
    """
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is typing.Union:
        inner = [arg for arg in args if arg is not type(None)]
        if raw.strip() == '' and len(inner) < len(args):
            return None
        return coerce(raw, inner[0], key)

    try:
        if origin in (tuple, Tuple):
            item_type = args[0] if args else str
            parts = [part.strip() for part in raw.split(',') if part.strip()]
            return tuple(coerce(part, item_type, key) for part in parts)
        if hint is bool:
            lowered = raw.strip().lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return str(raw)
    except ValueError as e:
        raise ConfigError(f"Invalid value for '{key}': {e}") from e


def from_mapping(cls: Type[T], mapping: Mapping[str, Any], base: Optional[T] = None,
                 prefix: str = '', _consumed: Optional[set] = None) -> T:
    """
    Build a config dataclass from raw key=value strings.

    Args:
        cls: Config dataclass type
        mapping: Raw values; non-string values are taken as already typed
        base: Instance whose values are used for keys not present in mapping
        prefix: Key prefix for nested configs

    Returns:
        New instance of cls

    Raises:
        ConfigError: On unknown keys or values that do not convert
    """
    top_level = _consumed is None
    consumed = set() if top_level else _consumed
    hints = typing.get_type_hints(cls)
    values: Dict[str, Any] = {}

    for field in dataclasses.fields(cls):
        hint = hints[field.name]
        key = f"{prefix}{field.name}"
        nested_base = getattr(base, field.name) if base is not None else None
        if dataclasses.is_dataclass(hint):
            values[field.name] = from_mapping(hint, mapping, base=nested_base,
                                              prefix=f"{key}_", _consumed=consumed)
            continue
        if key in mapping and mapping[key] is not None:
            consumed.add(key)
            raw = mapping[key]
            values[field.name] = coerce(raw, hint, key) if isinstance(raw, str) else raw
        elif base is not None:
            values[field.name] = nested_base

    if top_level:
        unknown = sorted(key for key in mapping if key not in consumed and mapping[key] is not None)
        if unknown:
            raise ConfigError(f"Unknown config keys for {cls.__name__}: {', '.join(unknown)}")

    return cls(**values)

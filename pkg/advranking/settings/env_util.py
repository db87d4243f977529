"""Settings utilities for working with environment variables"""

import re
import os
from pathlib import Path
from typing import Optional, Pattern, Sequence
from warnings import warn

import dj_database_url
from django.core.management.utils import get_random_secret_key

# Boolean spelling accepted in environment files
TRUE_VALUES = frozenset({"y", "yes", "t", "true", "on", "1"})
FALSE_VALUES = frozenset({"n", "no", "f", "false", "off", "0"})

# Numeric grids: 0.01,0.03,0.1 or 1 2 5 10
NUMBER_SEPARATOR = re.compile(r"\s*[,\s]\s*")


def load_string(envvar: str, default: str = "") -> str:
    """Load simple string environment variable"""

    return os.getenv(envvar, default)


def strtobool(value: str) -> bool:
    """Interpret the usual yes/no spellings, case insensitive"""

    lowered = value.strip().lower()
    if lowered in TRUE_VALUES:
        return True
    if lowered in FALSE_VALUES:
        return False
    raise ValueError("Invalid truth value: {!r}".format(value))


def load_boolean(envvar: str, default: bool = False) -> bool:
    """Load boolean environment variable"""

    value = os.getenv(envvar, str(default).lower())
    try:
        return strtobool(value)
    except ValueError as err:
        raise ValueError("{}: {}".format(envvar, err)) from err


def load_integer(envvar: str, default: int = 0) -> int:
    """Load integer environment variable"""

    value = os.getenv(envvar, "").strip()
    if not value:
        return default
    try:
        return int(value)
    except ValueError as err:
        raise ValueError("{}: not an integer: {!r}".format(envvar, value)) from err


def load_float(envvar: str, default: float = 0.0) -> float:
    """Load floating point environment variable"""

    value = os.getenv(envvar, "").strip()
    if not value:
        return default
    try:
        return float(value)
    except ValueError as err:
        raise ValueError("{}: not a number: {!r}".format(envvar, value)) from err


def load_path(envvar: str, default: Optional[Path] = None) -> Optional[Path]:
    """Load file system path from environment"""

    candidate = os.getenv(envvar, "")
    if candidate:
        return Path(candidate).resolve()
    else:
        return default


def load_sequence(
    envvar: str, separator: Pattern = re.compile(r":"), default: Sequence[str] = ()
) -> Sequence[str]:
    """Load sequence of strings from environment (i.e. PATH)"""

    value = os.getenv(envvar)
    if value is None:
        return default
    else:
        return separator.split(value)


def load_number_sequence(envvar: str, cast=float, default: Sequence = ()) -> Sequence:
    """Load comma (or space) separated numbers, i.e. an epsilon grid"""

    items = [
        item for item in load_sequence(envvar, separator=NUMBER_SEPARATOR) if item
    ]
    if not items:
        return tuple(default)
    try:
        return tuple(cast(item) for item in items)
    except ValueError as err:
        raise ValueError("{}: {}".format(envvar, err)) from err


def load_secret_key(
    envvar: str, keyfile: Optional[Path] = None, default: Optional[bytes] = None
) -> bytes:
    """Load SECRET_KEY from environment or file.

    Priority:
        1. Environment variable.
        2. Contents of key file.
        3. Default value (randomly generated if not provided).
    """

    key = os.getenv(envvar, None)
    if key is not None:
        return key.encode("utf-8")

    if keyfile is not None:
        if keyfile.is_file():
            return keyfile.read_bytes()
        else:
            warn(
                "Secret key file specified but not found;"
                " falling back to default secret."
            )

    if default is not None:
        return default
    else:
        return get_random_secret_key().encode("utf-8")


def load_database_url(envvar: str, default: str = "sqlite://:memory:") -> dict:
    """Load and parse database URL.

    Returns: Complete configuration dictionary.
    """

    # just wrap to have a consistent interface
    return dj_database_url.config(env=envvar, default=default)
